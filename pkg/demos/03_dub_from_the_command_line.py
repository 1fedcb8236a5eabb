"""
Dubbing a clip with the command line
====================================

Every stage is a ``priordub`` subcommand working inside one project
directory.  Here the whole chain runs on a synthetic 4-second clip with
small budgets, then the actor is driven by a different audio line.
"""
import json
import tempfile
from pathlib import Path

from priordub.audio import SAMPLE_RATE, write_wav
from priordub.cli import main
from priordub.synthetic import speech_like_audio

work = Path(tempfile.mkdtemp(prefix="priordub-demo-"))
fast = work / "fast.ini"
fast.write_text("[track]\nworking_resolution = 32\n[train]\niterations = 200\n[adapt]\nfrom_scratch = true\n")
project = ["-p", str(work / "actor"), "--config", str(fast)]

main(["synth", str(work / "clip.avi"), "--frames", "100", "--resolution", "64"])
for stage in (["ingest", str(work / "clip.avi")], ["track"], ["preprocess"], ["adapt"]):
    assert main(project + stage) == 0

###############################################################################
# Running a stage again with the same configuration is a no-op.
main(project + ["preprocess"])

###############################################################################
# A new 6-second line: the source frames play back and forth to cover it.
line = work / "line.wav"
write_wav(line, speech_like_audio(6.0, seed=11), SAMPLE_RATE)
main(project + ["dub", "--audio", str(line)])
main(project + ["evaluate"])

metrics = json.loads((work / "actor/identities/actor/evaluation/metrics.json").read_text())
print("held-out weighted L1 %.4f (untrained %.4f)" % (metrics["weighted_l1"], metrics["baseline_weighted_l1"]))
print("outputs in", work / "actor/identities/actor/dubs")
