"""Pseudo-labelled two-task training on a synthetic driver dataset, end to
end through the library API:

1. generate 10 classes x 8 frames, 20% of them without a visible face;
2. fit a face-only emotion teacher on the labelled faces;
3. detect and crop faces, label them with the teacher (no face -> Non-Face);
4. train the two-task student and evaluate it.

    python3 demos/02_self_training.py [workdir]
"""

import sys
import tempfile
from pathlib import Path

from vitdd import ModelConfig, TrainConfig, init_params
from vitdd.data import SyntheticSpec, generate_synthetic, read_fer_manifest, read_manifest
from vitdd.metrics import evaluate
from vitdd.pipeline import SyntheticDetector, build_student_manifest, train_teacher
from vitdd.training import train_loop

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="vitdd-demo-"))
cfg = ModelConfig.desk()

records = generate_synthetic(SyntheticSpec(num_classes=10, samples_per_class=8, face_size=8), work / "data")
print(f"{len(records)} frames, {sum(r.face_path is None for r in records)} without a face")

fer = read_fer_manifest(work / "data" / "fer" / "manifest.csv")
teacher_cfg = cfg.teacher()
teacher, result = train_teacher(fer, work / "data" / "fer", teacher_cfg,
                                TrainConfig(base_lr=1e-3, total_epochs=100, batch_size=16, crop_pad=1))
print(f"teacher train accuracy {float(result.history[-1]['emotion_acc']):.3f}")

build = build_student_manifest(records, work / "data", SyntheticDetector(), teacher, teacher_cfg, work / "student")
print(f"faces found {build.faces_found}, Non-Face {build.non_face}")

student = read_manifest(work / "student" / "manifest.csv")
params = init_params(cfg, seed=0)
tc = TrainConfig(base_lr=1e-3, total_epochs=200, batch_size=16, crop_pad=1)
result = train_loop(student, work / "student", params, cfg, tc, out_dir=work / "run")
print(f"best epoch {result.best_epoch}")

report = evaluate(params, cfg, student, work / "student", include_pseudo=True)
print(report.table())
print(f"artifacts in {work}")
