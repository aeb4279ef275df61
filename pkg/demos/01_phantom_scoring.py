"""Generate a phantom, threshold it and score it two ways.

Run with ``python demos/01_phantom_scoring.py``.
"""

from cacscore.candidates import Label, connected_components_2d, threshold_candidates
from cacscore.phantom import PhantomSpec, generate_phantom
from cacscore.scoring import ConstantModel, predict_volume, reference_score

vol, mask, truth = generate_phantom(PhantomSpec(seed=7))
print("grid (x, y, z):", vol.dims, "spacing mm:", vol.spacing)

for label in (Label.CORONARY, Label.AORTIC, Label.OTHER):
    lesions = truth.by_label(label)
    print(f"{label.annotation_name:>9}: {len(lesions)} lesions, {sum(len(l.voxels) for l in lesions)} voxels")

cands = threshold_candidates(vol, mask)
blobs = connected_components_2d(cands, vol.dims, vol.spacing)
print(f"{len(cands)} candidate pixels >= 130 HU in the ROI, {len(blobs)} in-slice blobs")

# reference: only the annotated coronary lesions count
ref = reference_score(vol, truth.lesions, "demo")
print("reference Agatston", round(ref.agatston, 3), "class", ref.risk_class)

# the always-positive stub keeps every candidate, aortic and noise included
everything = predict_volume(ConstantModel(1.0), vol, mask, "demo")
print("all-candidate Agatston", round(everything.agatston, 3), "class", everything.risk_class)
