"""
Fitting the face model to a clip
================================

A procedural identity speaks a few seconds of synthetic audio.  We track
it back from pixels and landmarks and compare the recovered jaw with the
one that drove the render.
"""
import numpy as np

from priordub.face_model import make_synthetic_assets
from priordub.reconstruction import OracleLandmarkDetector, LandmarkRegressionShapeBackend, track_video
from priordub.synthetic import make_clip, make_identity

assets = make_synthetic_assets(seed=0, V=512)
clip = make_clip(assets, make_identity(assets, 7), n_frames=20, resolution=32, seed=7)
print("clip:", clip.frames.shape, "audio samples:", clip.audio.shape[0])

###############################################################################
# Landmarks come from projecting the true mesh here.  A real detector plugs in
# through the same interface.
landmarks = OracleLandmarkDetector(clip.params, assets)
seq = track_video(clip.frames, assets, landmarks, LandmarkRegressionShapeBackend(assets))

true_jaw = np.array([float(p.jaw) for p in clip.params])
fit_jaw = np.array([float(p.jaw) for p in seq.frames])
print("mean photometric residual: %.4f" % np.mean(seq.residuals))
print("jaw correlation: %.3f" % np.corrcoef(true_jaw, fit_jaw)[0, 1])
print("degraded frames:", int(seq.degraded.sum()))
