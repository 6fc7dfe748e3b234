import math
import struct

import numpy as np
import pytest

from ffvit import checkpoint as ck
from ffvit.checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from ffvit.config import TrainConfig, load_config_file
from ffvit.data import Dataset, synthetic_blobs
from ffvit.errors import CorruptionError, FormatError, NonFiniteLossError
from ffvit.model import build_preset, init_params, model_forward
from ffvit.optim import OptimizerState
from ffvit.training import LOG_HEADER, evaluate_top1, read_log, train

# desk-scale settings under which both mechanisms train reliably in 5 epochs
SANITY = TrainConfig(epochs=5, batch_size=16, learning_rate=3e-3)


@pytest.fixture(scope="module")
def blobs():
    return synthetic_blobs(10, 100, 32, seed=1), synthetic_blobs(10, 30, 32, seed=2)


@pytest.fixture(scope="module")
def small_blobs():
    return synthetic_blobs(10, 12, 32, seed=3)


def make_checkpoint(seed=0):
    mc = build_preset("reduced")
    params = init_params(mc, seed)
    rng = np.random.default_rng(seed)
    state = OptimizerState(
        m={k: rng.standard_normal(p.shape).astype(np.float32) for k, p in params.items()},
        v={k: rng.random(p.shape).astype(np.float32) for k, p in params.items()},
        step=37,
    )
    words = ck.pcg64_to_words(np.random.PCG64(seed))
    return Checkpoint(mc, TrainConfig(seed=seed, grad_clip_norm=None), params, state, words, 4, 0.875)


# -- evaluation -------------------------------------------------------------------------


def _head_only_params(config, weight, bias):
    p = init_params(config, 0)
    p["head.weight"].data = np.asarray(weight, dtype=np.float32)
    p["head.bias"].data = np.asarray(bias, dtype=np.float32)
    return p


def test_top1_constant_logits_pick_class_zero():
    c = build_preset("reduced")
    ds = synthetic_blobs(10, 7, 32, 0)
    p = _head_only_params(c, np.zeros((16, 10)), np.zeros(10))
    assert evaluate_top1(p, c, ds) == pytest.approx(0.1)


def test_top1_perfect_predictor():
    c = build_preset("reduced")
    ds = synthetic_blobs(10, 5, 32, 0)
    ds = Dataset(ds.images, np.full(len(ds), 6), 10)
    bias = np.zeros(10)
    bias[6] = 100.0
    assert evaluate_top1(_head_only_params(c, np.zeros((16, 10)), bias), c, ds) == 1.0


def test_top1_matches_per_sample_loop():
    c = build_preset("reduced")
    p = init_params(c, 5)
    ds = synthetic_blobs(10, 10, 32, 4)
    hits = 0
    for i in range(len(ds)):
        row = model_forward(ds.images[i:i + 1], p, c).data[0]
        best = 0
        for k in range(1, len(row)):
            if row[k] > row[best]:
                best = k
        hits += best == ds.labels[i]
    acc = evaluate_top1(p, c, ds, batch_size=7)
    assert acc == hits / len(ds)
    assert 0.0 <= acc <= 1.0


# -- checkpoint format --------------------------------------------------------------------


def test_checkpoint_round_trip_bitwise(tmp_path):
    ckpt = make_checkpoint()
    path = tmp_path / "a.ffvt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.model_config == ckpt.model_config and back.train_config == ckpt.train_config
    assert (back.epoch, back.step, back.best_metric, back.rng_state) == (4, 37, 0.875, ckpt.rng_state)
    assert list(back.params) == list(ckpt.params)
    for k in ckpt.params:
        assert back.params[k].data.tobytes() == ckpt.params[k].data.tobytes()
        assert back.opt_state.m[k].tobytes() == ckpt.opt_state.m[k].tobytes()
        assert back.opt_state.v[k].tobytes() == ckpt.opt_state.v[k].tobytes()
    save_checkpoint(back, tmp_path / "b.ffvt")
    assert (tmp_path / "b.ffvt").read_bytes() == path.read_bytes()


def test_checkpoint_layout_header():
    raw = encode_checkpoint(make_checkpoint())
    assert raw[:4] == b"FFVT"
    assert struct.unpack("<I", raw[4:8]) == (1,)
    (n,) = struct.unpack("<I", raw[8:12])
    lines = raw[12:12 + n].decode("utf-8").splitlines()
    assert lines == sorted(lines)
    assert "model.dim=16" in lines and "train.grad_clip_norm=none" in lines
    (count,) = struct.unpack("<I", raw[12 + n:16 + n])
    assert count == len(make_checkpoint().params)
    words = struct.unpack("<4Q", raw[-32:])
    assert words == make_checkpoint().rng_state


def test_rng_words_restore_generator():
    g = np.random.Generator(np.random.PCG64(99))
    g.bit_generator.random_raw(3)
    words = ck.pcg64_to_words(g.bit_generator)
    expected = g.bit_generator.random_raw(5)
    restored = ck.words_to_pcg64(words)
    np.testing.assert_array_equal(restored.random_raw(5), expected)


def test_truncated_checkpoint_is_corruption_error():
    raw = encode_checkpoint(make_checkpoint())
    for cut in (5, 9, 40, len(raw) // 2, len(raw) - 33, len(raw) - 1):
        with pytest.raises(CorruptionError):
            decode_checkpoint(raw[:cut])


def test_bad_magic_and_version():
    raw = encode_checkpoint(make_checkpoint())
    with pytest.raises(FormatError, match="magic"):
        decode_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="version"):
        decode_checkpoint(raw[:4] + struct.pack("<I", 2) + raw[8:])


def test_shape_inconsistent_with_config():
    raw = encode_checkpoint(make_checkpoint())
    tampered = raw.replace(b"model.depth=2", b"model.depth=3")
    with pytest.raises(CorruptionError):
        decode_checkpoint(tampered)
    tampered = raw.replace(b"model.token_hidden=68", b"model.token_hidden=67")
    with pytest.raises(CorruptionError, match="shape"):
        decode_checkpoint(tampered)


def test_trailing_bytes_rejected():
    with pytest.raises(CorruptionError):
        decode_checkpoint(encode_checkpoint(make_checkpoint()) + b"\x00")


def test_failed_write_keeps_previous_checkpoint(tmp_path, monkeypatch):
    path = tmp_path / "last.ffvt"
    save_checkpoint(make_checkpoint(0), path)
    before = path.read_bytes()

    def boom(fd):
        raise OSError("disk full")

    monkeypatch.setattr(ck.os, "fsync", boom)
    with pytest.raises(OSError):
        save_checkpoint(make_checkpoint(1), path)
    assert path.read_bytes() == before


# -- training -------------------------------------------------------------------------------


def _strip_seconds(path):
    return [line.rsplit(",", 1)[0] for line in path.read_text().splitlines()]


def test_train_writes_log_and_checkpoints(tmp_path, small_blobs):
    records = train(build_preset("reduced"), TrainConfig(epochs=2, batch_size=16), small_blobs, tmp_path)
    assert [r["epoch"] for r in records] == [1, 2]
    assert records[-1]["step"] == 2 * math.ceil(len(small_blobs) / 16)
    assert (tmp_path / "train_log.csv").read_text().splitlines()[0] == ",".join(LOG_HEADER)
    assert [r["train_loss"] for r in read_log(tmp_path / "train_log.csv")] == [r["train_loss"] for r in records]
    assert {p.name for p in tmp_path.glob("*.ffvt")} == {"epoch_0001.ffvt", "epoch_0002.ffvt", "last.ffvt"}
    last = load_checkpoint(tmp_path / "last.ffvt")
    assert last.epoch == 2 and last.best_metric == max(r["eval_top1"] for r in records)


def test_zero_lr_freezes_parameters(tmp_path, small_blobs):
    mc = build_preset("reduced")
    tc = TrainConfig(epochs=1, batch_size=16, learning_rate=0.0, weight_decay=0.0)
    train(mc, tc, small_blobs, tmp_path)
    after = load_checkpoint(tmp_path / "last.ffvt").params
    init = init_params(mc, tc.seed)
    for k in init:
        assert after[k].data.tobytes() == init[k].data.tobytes()


def test_same_seed_same_log(tmp_path, small_blobs):
    tc = TrainConfig(epochs=2, batch_size=16, flip=True, crop_pad=2)
    mc = build_preset("reduced", dropout=0.1)
    train(mc, tc, small_blobs, tmp_path / "a")
    train(mc, tc, small_blobs, tmp_path / "b")
    train(mc, tc.replace(seed=1), small_blobs, tmp_path / "c")
    a = _strip_seconds(tmp_path / "a" / "train_log.csv")
    assert a == _strip_seconds(tmp_path / "b" / "train_log.csv")
    assert a != _strip_seconds(tmp_path / "c" / "train_log.csv")


def test_resume_matches_uninterrupted_run(tmp_path, small_blobs):
    mc = build_preset("reduced", dropout=0.1)
    tc = TrainConfig(epochs=3, batch_size=16, flip=True, crop_pad=1)
    full = train(mc, tc, small_blobs, tmp_path / "full")
    partial = tmp_path / "partial"
    train(mc, tc, small_blobs, partial, stop_after_epoch=1)
    resumed = train(None, None, small_blobs, partial, resume=partial / "epoch_0001.ffvt")
    assert [r["train_loss"] for r in resumed] == [r["train_loss"] for r in full[1:]]
    a = (tmp_path / "full" / "last.ffvt").read_bytes()
    b = (partial / "last.ffvt").read_bytes()
    assert a == b
    assert _strip_seconds(tmp_path / "full" / "train_log.csv") == _strip_seconds(partial / "train_log.csv")


def test_non_finite_loss_aborts_with_step(tmp_path):
    ds = synthetic_blobs(2, 4, 32, 0)
    ds.images[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLossError) as err:
        train(build_preset("reduced"), TrainConfig(epochs=1, batch_size=8), ds, tmp_path)
    assert err.value.step == 1
    assert "step 1" in str(err.value)


def test_dataset_geometry_must_match(tmp_path):
    with pytest.raises(ValueError):
        train(build_preset("reduced"), TrainConfig(epochs=1), synthetic_blobs(2, 2, 16, 0), tmp_path)


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_halves_within_five_epochs(tmp_path, blobs, seed):
    train_set, test_set = blobs
    records = train(build_preset("reduced"), SANITY.replace(seed=seed), train_set, tmp_path,
                    eval_dataset=test_set)
    assert records[4]["train_loss"] < 0.5 * records[0]["train_loss"]


def test_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# reduced run\npreset=reduced\nvariant=attention_baseline\n"
                   "train.epochs=3\nlearning_rate=0.002\nbetas=0.8,0.99\ngrad_clip_norm=none\n")
    mc, tc = load_config_file(cfg)
    assert mc.variant == "attention_baseline" and mc.dim == 16
    assert (tc.epochs, tc.learning_rate, tc.betas, tc.grad_clip_norm) == (3, 0.002, (0.8, 0.99), None)
    cfg.write_text("dim=8\nimage_size=16\npatch_size=4\nnum_classes=3\ndepth=1\nbogus=1\n")
    with pytest.raises(Exception, match="bogus"):
        load_config_file(cfg)
