import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from vitdd import checkpoint
from vitdd.data import (NON_FACE, ManifestRecord, Provenance, SyntheticSpec, generate_synthetic, load_model_image,
                        normalize, read_fer_manifest, read_manifest, read_ppm, write_ppm)
from vitdd.errors import DataError, DetectorContractError
from vitdd.metrics import evaluate
from vitdd.model import EMO, FACE, ModelConfig, forward, forward_tokens, init_params
from vitdd.pipeline import (FaceDetection, NullDetector, StubDetector, SyntheticDetector, blank_face,
                            build_student_manifest, detect_and_crop, label_from_logits, load_teacher, pseudo_label,
                            teacher_logits, train_teacher)
from vitdd.tensor import Tensor, no_grad
from vitdd.training import TrainConfig

from test_data import bilinear_oracle

DESK = ModelConfig.desk()
TEACHER = DESK.teacher()


class AlwaysDetector:
    def __init__(self, box):
        self.box = box

    def detect(self, sample_id, image):
        return FaceDetection(True, self.box)


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic(SyntheticSpec(num_classes=10, samples_per_class=2, seed=3), root)
    return root


@pytest.fixture(scope="module")
def teacher():
    return init_params(TEACHER, seed=5)


# ---- detection and cropping -------------------------------------------------------

def test_identity_crop():
    img = np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    det, crop = detect_and_crop(img, AlwaysDetector((32, 0, 32, 32)), size=(32, 32))
    assert det.found
    np.testing.assert_array_equal(crop, img[0:32, 32:64].transpose(2, 0, 1))


def test_downscale_matches_bilinear_oracle():
    img = np.random.default_rng(1).integers(0, 256, (80, 80, 3), dtype=np.uint8)
    _, crop = detect_and_crop(img, AlwaysDetector((8, 4, 64, 64)), size=(32, 32))
    ref = bilinear_oracle(img[4:68, 8:72].transpose(2, 0, 1).astype(float), 32, 32)
    assert np.abs(crop - ref).max() < 1e-9


def test_not_found_gives_none():
    det, crop = detect_and_crop(np.zeros((32, 32, 3), np.uint8), NullDetector())
    assert not det.found and crop is None


@pytest.mark.parametrize("box", [(30, 0, 4, 4), (0, 0, 0, 5), (-1, 0, 4, 4), (0, 30, 4, 4)])
def test_box_outside_bounds(box):
    with pytest.raises(DetectorContractError):
        detect_and_crop(np.zeros((32, 32, 3), np.uint8), AlwaysDetector(box))


def test_stub_detector_sidecar(tmp_path):
    (tmp_path / "ann.csv").write_text("# boxes\na,1,2,3,4\nb,none\n")
    det = StubDetector(tmp_path / "ann.csv")
    assert det.detect("a", None) == FaceDetection(True, (1, 2, 3, 4))
    assert not det.detect("b", None).found and not det.detect("zzz", None).found


def test_synthetic_detector_agrees_with_annotations(synth):
    stub = StubDetector(synth / "annotations.csv")
    rule = SyntheticDetector()
    for r in read_manifest(synth / "manifest.csv"):
        img = read_ppm(synth / r.driver_path)
        assert rule.detect(r.sample_id, img) == stub.detect(r.sample_id, img)


# ---- pseudo labels --------------------------------------------------------------------

def test_pseudo_label_none_is_non_face(teacher):
    assert pseudo_label(None, teacher, TEACHER) == (NON_FACE, None)


def test_label_from_logits_examples():
    label, conf = label_from_logits([0, 0, 0, 0, 0, 0, 9])
    oracle = math.exp(9) / (6 + math.exp(9))
    assert label == 6 and abs(conf - oracle) < 1e-15
    assert abs(oracle - 0.999260) < 1e-6
    assert label_from_logits(np.zeros(7)) == (0, pytest.approx(1 / 7, abs=1e-15))


@given(arrays(np.float64, 7, elements=st.sampled_from([-1.0, 0.0, 0.5, 2.0])))
def test_label_tie_rule_exhaustive(logits):
    label, conf = label_from_logits(logits)
    p = np.exp(logits) / np.exp(logits).sum()
    best = [j for j in range(7) if all(p[j] >= p[k] for k in range(7))]
    assert label == min(best)
    assert abs(conf - p[label]) < 1e-15


def test_blank_face():
    f = blank_face((32, 32))
    assert f.shape == (3, 32, 32) and f.data.sum() == 0.0
    p = init_params(DESK, 0)
    d = np.random.default_rng(0).normal(size=(3, 16, 16))
    a = forward(d, blank_face((8, 8)), p, DESK)
    b = forward(d, blank_face((8, 8)), p, DESK)
    assert np.all(np.isfinite(a[0].data)) and np.all(np.isfinite(a[1].data))
    assert a[0].data.tobytes() == b[0].data.tobytes()


# ---- student manifest --------------------------------------------------------------------

def test_null_detector_all_non_face(synth, teacher, tmp_path):
    build = build_student_manifest(read_manifest(synth / "manifest.csv"), synth, NullDetector(), teacher, TEACHER,
                                   tmp_path)
    assert all(r.emotion == NON_FACE and r.face_path is None for r in build.records)
    assert build.faces_found == 0 and build.non_face == 20


def test_constant_teacher_single_label(synth, tmp_path):
    p = init_params(TEACHER, 0)
    for k in p:
        if k.startswith("heads."):
            p[k] = Tensor(np.zeros_like(p[k].data))
    p["heads.emo.bias"] = Tensor(np.array([0, 0, 0, 4.0, 0, 0, 0]))
    build = build_student_manifest(read_manifest(synth / "manifest.csv"), synth, AlwaysDetector((16, 0, 16, 16)), p, TEACHER,
                                   tmp_path)
    assert {r.emotion for r in build.records} == {3}


def test_histogram_matches_per_sample_oracle(synth, teacher, tmp_path):
    records = read_manifest(synth / "manifest.csv")
    det = StubDetector(synth / "annotations.csv")
    build = build_student_manifest(records, synth, det, teacher, TEACHER, tmp_path)
    oracle = Counter()
    for r in records:
        _, crop = detect_and_crop(read_ppm(synth / r.driver_path), det, r.sample_id, TEACHER.face_size)
        if crop is None:
            oracle[NON_FACE] += 1
            continue
        face = normalize(np.clip(np.rint(crop), 0, 255).astype(np.uint8).transpose(1, 2, 0))
        oracle[pseudo_label(face, teacher, TEACHER)[0]] += 1
    assert Counter(r.emotion for r in build.records) == oracle
    assert len(build.records) == len(records) == 20


def test_manifest_invariants_and_idempotence(synth, teacher, tmp_path):
    records = read_manifest(synth / "manifest.csv")
    det = StubDetector(synth / "annotations.csv")
    a = build_student_manifest(records, synth, det, teacher, TEACHER, tmp_path / "a", threads=1)
    b = build_student_manifest(records, synth, det, teacher, TEACHER, tmp_path / "b", threads=4)
    assert a.manifest_bytes == b.manifest_bytes
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == a.manifest_bytes
    assert sorted(r.sample_id for r in a.records) == sorted(r.sample_id for r in records)
    for r in read_manifest(tmp_path / "a" / "manifest.csv"):
        assert r.provenance is Provenance.PSEUDO
        assert (r.emotion == NON_FACE) == (r.face_path is None) == (r.confidence is None)
        assert (tmp_path / "a" / r.driver_path).exists()


def test_unreadable_image_collected(synth, teacher, tmp_path):
    records = read_manifest(synth / "manifest.csv")
    broken = records[:3] + [ManifestRecord("zz", "driver/missing.ppm", None, 0, 7)]
    build = build_student_manifest(broken, synth, NullDetector(), teacher, TEACHER, tmp_path)
    assert len(build.records) == 3 and len(build.errors) == 1 and "zz" in build.errors[0]


# ---- teacher ----------------------------------------------------------------------------

def test_teacher_overfits_56_faces(tmp_path):
    root = tmp_path / "d"
    generate_synthetic(SyntheticSpec(samples_per_class=1, fer_per_class=8, seed=1), root)
    rows = read_fer_manifest(root / "fer" / "manifest.csv")
    assert len(rows) == 56
    tc = TrainConfig(base_lr=1e-3, total_epochs=100, batch_size=16, crop_pad=1, seed=0)
    params, result = train_teacher(rows, root / "fer", TEACHER, tc, out_path=tmp_path / "t.ckpt")
    assert any(h["emotion_acc"] == "1.000000" for h in result.history)
    faces = np.stack([load_model_image(root / "fer" / p, TEACHER.face_size) for _, p, _ in rows])
    preds = teacher_logits(faces, params, TEACHER).argmax(1)
    assert preds.tolist() == [e for _, _, e in rows]
    reloaded, cfg = load_teacher(tmp_path / "t.ckpt")
    assert cfg == TEACHER
    assert teacher_logits(faces, reloaded, cfg).tobytes() == teacher_logits(faces, params, TEACHER).tobytes()


def test_teacher_single_sample_monotone_descent(tmp_path):
    face = np.random.default_rng(0).integers(0, 256, (8, 8, 3), dtype=np.uint8)
    write_ppm(tmp_path / "f.ppm", face)
    tc = TrainConfig(base_lr=1e-4, warmup_epochs=0, warmup_start_lr=1e-4, total_epochs=10, batch_size=1,
                     random_crop=False, hflip=False)
    _, res = train_teacher([("f", "f.ppm", 2)], tmp_path, TEACHER, tc)
    nll = [float(h["nll"]) for h in res.history]
    assert all(b < a for a, b in zip(nll, nll[1:]))


def test_teacher_empty_dataset():
    with pytest.raises(DataError):
        train_teacher([], ".", TEACHER, TrainConfig())


def test_load_teacher_rejects_student(tmp_path):
    checkpoint.save_checkpoint(tmp_path / "s.ckpt", init_params(DESK), DESK)
    with pytest.raises(DataError):
        load_teacher(tmp_path / "s.ckpt")


# ---- evaluation over a manifest --------------------------------------------------------

def test_evaluate_pseudo_filter_and_determinism(synth, teacher, tmp_path):
    build = build_student_manifest(read_manifest(synth / "manifest.csv"), synth, StubDetector(synth / "annotations.csv"),
                                   teacher, TEACHER, tmp_path)
    p = init_params(DESK, 0)
    gt = evaluate(p, DESK, read_manifest(synth / "manifest.csv"), synth)
    assert gt.emotion_count == 20 and gt.count == 20
    st = evaluate(p, DESK, build.records, tmp_path)
    assert st.emotion_count == 0 and st.emotion_accuracy is None
    inc = evaluate(p, DESK, build.records, tmp_path, include_pseudo=True)
    assert inc.emotion_count == 20
    again = evaluate(p, DESK, build.records, tmp_path, include_pseudo=True, threads=3)
    assert inc.to_csv() == again.to_csv()
    with pytest.raises(DataError):
        evaluate(p, DESK, [], tmp_path)
