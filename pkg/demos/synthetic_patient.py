"""
One synthetic patient, end to end
=================================

Generate a patient, look at its lesions and FFR labels, and check that the
ischemic territory is visibly darker in the myocardium phantom.
"""

import numpy as np

from stenomil import synthgen
from stenomil.synthgen import ArteryGeometry, CohortConfig, Stenosis, ffr_oracle

# the oracle alone: a 50% diameter, 10 mm lesion in a 1.5 mm artery sits right at the threshold
lesion = ArteryGeometry(300, 1.5, 0.0, [Stenosis(center=100, length_mm=10.0, r_min=0.75)])
print("calibration lesion FFR:", round(ffr_oracle(lesion), 4))

# tighter lumen -> lower FFR
for r in (1.2, 0.9, 0.75, 0.6):
    g = ArteryGeometry(300, 1.5, 0.0, [Stenosis(100, 10.0, r)])
    print(f"  r_min {r:.2f} mm -> FFR {ffr_oracle(g):.3f}")

cfg = CohortConfig(patients=1, seed=3)
patient = next(synthgen.iter_cohort(cfg))
print(f"\n{patient.patient_id}: {patient.n_arteries} arteries, min FFR {patient.min_ffr:.3f}, label {patient.label}")
for i, (g, f) in enumerate(zip(patient.geometries, patient.ffr)):
    if g.stenoses:
        s = g.stenoses[0]
        print(f"  artery {i:2d} (territory {g.territory}): L={g.length}, lesion {s.length_mm:.1f} mm, "
              f"r_min {s.r_min:.2f} mm, FFR {f:.3f}")

# mean myocardium intensity per territory
# territories are angular sectors of the ring, so they can be recomputed from the mask alone
z, h, w = patient.myo_mask.shape
yy, xx = np.mgrid[:h, :w]
theta = np.arctan2(yy - (h - 1) / 2, xx - (w - 1) / 2)
sector = np.floor((theta + np.pi) / (2 * np.pi / synthgen.N_TERRITORIES)).astype(int) % synthgen.N_TERRITORIES
tmap = np.where(patient.myo_mask, sector[None], -1)
print("\nterritory FFR and mean myocardium HU:")
for t in range(synthgen.N_TERRITORIES):
    sel = tmap == t
    print(f"  territory {t}: FFR {patient.territory_ffr[t]:.3f}, mean {patient.myo_volume[sel].mean():7.2f} HU")

# a straightened artery cross-section along the culprit
culprit = int(np.argmin(patient.ffr))
vol = patient.arteries[culprit].data
bright = (vol > 225).sum(axis=(1, 2))
print(f"\nculprit artery {culprit}: lumen area (voxels above 225 HU) min {bright.min()} at point {bright.argmin()}, "
      f"median {int(np.median(bright))}")
