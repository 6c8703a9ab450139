"""Acceptance criteria. Each test records one PASS/FAIL line, printed at the end of the session.

Run alone with ``pytest tests/test_acceptance.py -v``; the end-to-end criteria
(6, 7) train seven small models and take roughly half an hour on one core.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from braintalker import dataio, dsp, evaluation, synthdata
from braintalker import training as tr
from braintalker.encoder import LatentEncoder
from braintalker.extractor import ExtractorSpec, parameter_checksum
from braintalker.melgen import PreLNFFTBlock
from braintalker.model import EcogMelModel, prepare_ecog

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"
RESULTS = []

# frozen thresholds
METRIC_TOL = 1e-9
GRAD_REL_TOL = 1e-4
LOSS_REDUCTION = 0.5
HELDOUT_PCC = 0.7
CONTROL_PCC = 0.2
ABLATION_MARGIN = 0.05
SEEDS = (0, 1, 2)


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------- 1


def test_criterion_1_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((98, 13))
    ident = (evaluation.rmse(x, x), evaluation.mcd(x, x), evaluation.pcc(x, x))
    ident_err = max(abs(ident[0]), abs(ident[1]), abs(ident[2] - 1))
    oracle_err = 0.0
    for _ in range(100):
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((5, 7))
        ac, bc = a - a.mean(), b - b.mean()
        direct = np.sum(ac * bc) / math.sqrt(np.sum(ac**2) * np.sum(bc**2))
        oracle_err = max(oracle_err, abs(evaluation.pcc(a, b) - direct))
    a, b = rng.standard_normal((50, 13)), rng.standard_normal((50, 13))
    shift_err = max(abs(evaluation.mcd(a + s, b) - evaluation.mcd(a, b)) for s in (-7.5, 0.3, 12.0))
    elapsed = time.perf_counter() - t0
    ok = max(ident_err, oracle_err, shift_err) <= METRIC_TOL and elapsed < 1.0
    assert record(1, ok, f"identity err {ident_err:.1e}, pcc oracle err {oracle_err:.1e}, "
                         f"mcd shift err {shift_err:.1e}, {elapsed:.2f} s")


# ---------------------------------------------------------------- 2


def test_criterion_2_shape_pipeline():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    ecog = dataio.EcogRecording(np.random.default_rng(0).standard_normal((8, 2000)))
    x = prepare_ecog(ecog)
    model = EcogMelModel(tr.TrainConfig()).eval()
    with torch.no_grad():
        z = model.coarse(torch.as_tensor(x, dtype=torch.float32)[None])
        frames = dsp.num_frames(x.shape[1])
        mel = model(None, frames, z=z).mel[0]
    elapsed = time.perf_counter() - t0
    ok = (x.shape == (8, 16000) and z.shape[2] == 49 and frames == 1 + (16000 - 400) // 160 == 98
          and tuple(mel.shape) == (98, 13) and elapsed < 10)
    assert record(2, ok, f"16 kHz input {x.shape}, Z {tuple(z.shape[1:])}, mel {tuple(mel.shape)}, {elapsed:.1f} s")


# ---------------------------------------------------------------- 3


def test_criterion_3_gradient_check(tiny_split):
    t0 = time.perf_counter()
    cfg = tr.tiny_config()
    torch.manual_seed(0)
    model = EcogMelModel(cfg).double()
    batch = tr.load_examples(tiny_split.train[:1], cfg, dtype=torch.float64)
    errors = tr.gradient_check(model, batch, cfg)
    worst = max(errors, key=errors.get)
    n_params = sum(p.numel() for p in model.trainable_parameters())
    elapsed = time.perf_counter() - t0
    ok = errors[worst] <= GRAD_REL_TOL and elapsed < 120
    assert record(3, ok, f"{len(errors)} tensors / {n_params} parameters, max rel err {errors[worst]:.1e} "
                         f"({worst}), {elapsed:.0f} s")


# ---------------------------------------------------------------- 4


def test_criterion_4_architectural_identities():
    torch.manual_seed(0)
    block = PreLNFFTBlock(32, 4, 128).double()
    block.zero_residual_branches()
    x = torch.randn(2, 17, 32, dtype=torch.float64)
    block_ok = torch.equal(block(x), x)

    enc = LatentEncoder(8, 32).double()
    for p in enc.gru.parameters():
        torch.nn.init.zeros_(p)
    z = torch.randn(2, 8, 17, 32, dtype=torch.float64)
    enc_ok = torch.equal(enc(z), enc.merge(z))
    assert record(4, block_ok and enc_ok, f"pre-LN block identity {block_ok}, zero-GRU encoder identity {enc_ok}")


# ---------------------------------------------------------------- 5


def _tiny_wav2vec(path):
    transformers = pytest.importorskip("transformers")
    cfg = transformers.Wav2Vec2Config(
        hidden_size=16, num_hidden_layers=1, num_attention_heads=2, intermediate_size=32,
        conv_dim=(8,) * 7, num_conv_pos_embeddings=16, num_conv_pos_embedding_groups=2,
    )
    torch.manual_seed(0)
    transformers.Wav2Vec2Model(cfg).save_pretrained(path)
    return str(path)


@pytest.mark.parametrize("kind", ["frozen scratch stand-in", "pretrained adapter"])
def test_criterion_5_frozen_extractor(tiny_split, tmp_path, kind):
    if kind == "pretrained adapter":
        spec = ExtractorSpec.pretrained(_tiny_wav2vec(tmp_path / "w2v"), dim=16)
    else:
        spec = ExtractorSpec(dim=16, n_blocks=2, ffn_dim=16, heads=2, conv_dim=4, frozen=True)
    cfg = tr.tiny_config(epochs=100, lr0=1e-2, extractor=spec)
    torch.manual_seed(cfg.seed)
    before = parameter_checksum(EcogMelModel(cfg).extractor)
    ck = tr.train(tiny_split, cfg, max_steps=50)
    after = parameter_checksum(ck.build_model().extractor)
    moved = any(not torch.equal(ck.model_state[k], v) for k, v in EcogMelModel(cfg).state_dict().items()
                if k.startswith("melgen."))
    ok = before == after == ck.extractor_checksum and ck.epoch == math.ceil(50 / len(tiny_split.train)) and moved
    assert record(5, ok, f"{kind}: extractor checksum {before[:12]} -> {after[:12]} after 50 steps")


# ---------------------------------------------------------------- 6 and 7

ACCEPT_SYNTH = synthdata.SynthConfig()


def _accept_config(**overrides):
    raw = json.loads((CONFIG_DIR / "synthetic_train.json").read_text())
    return tr.TrainConfig.from_dict(raw | overrides)


@pytest.fixture(scope="session")
def synthetic(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic_corpus")
    entries = dataio.load_manifest(synthdata.generate_corpus(ACCEPT_SYNTH, root))
    split = dataio.split_corpus(entries, "w07", 0)
    cfg = _accept_config()
    examples = {name: tr.load_examples(getattr(split, name), cfg) for name in ("train", "seen_test", "unseen_test")}
    return split, examples


_RUNS = {}


def _mean_pcc(model, examples):
    return float(np.mean([evaluation.pcc(model.synthesize(e.ecog.numpy(), e.mel.shape[0]), e.mel.numpy())
                          for e in examples]))


def _run(synthetic, seed, use_lf=True, shuffle=False):
    key = (seed, use_lf, shuffle)
    if key not in _RUNS:
        split, ex = synthetic
        cfg = _accept_config(seed=seed, use_lf=use_lf, shuffle_pairs=shuffle)
        torch.manual_seed(cfg.seed)
        initial = tr.evaluate_mel_loss(EcogMelModel(cfg), ex["seen_test"])
        t0 = time.perf_counter()
        ck = tr.train(split, cfg, examples=(ex["train"], ex["seen_test"]))
        model = ck.build_model()
        _RUNS[key] = {
            "initial": initial,
            "final": tr.evaluate_mel_loss(model, ex["seen_test"]),
            "pcc": _mean_pcc(model, ex["seen_test"]),
            "unseen_pcc": _mean_pcc(model, ex["unseen_test"]),
            "seconds": time.perf_counter() - t0,
        }
    return _RUNS[key]


@pytest.mark.slow
def test_criterion_6_end_to_end_learnability(synthetic):
    split, ex = synthetic
    runs = [_run(synthetic, s) for s in SEEDS]
    control = _run(synthetic, SEEDS[0], shuffle=True)
    reductions = [1 - r["final"] / r["initial"] for r in runs]
    pccs = [r["pcc"] for r in runs]
    unseen = ", ".join(f"{r['unseen_pcc']:.3f}" for r in runs)
    ok = (min(reductions) >= LOSS_REDUCTION and min(pccs) >= HELDOUT_PCC
          and abs(control["pcc"]) <= CONTROL_PCC)
    assert record(6, ok, (
        f"held-out L_mel reduction {', '.join(f'{r:.0%}' for r in reductions)}; "
        f"held-out PCC {', '.join(f'{p:.3f}' for p in pccs)}; "
        f"shuffled control PCC {control['pcc']:.3f}; "
        f"(unseen-word PCC {unseen}; "
        f"{sum(r['seconds'] for r in runs + [control]) / 60:.1f} min)"
    ))


@pytest.mark.slow
def test_criterion_6_oracle_calibration(synthetic):
    split, _ = synthetic

    def pairs(entries):
        return [synthdata.generate_pair(int(e.word_label[1:]), e.trial_index, ACCEPT_SYNTH) for e in entries]

    train = pairs(split.train)
    oracle = float(np.mean(synthdata.least_squares_oracle(train, pairs(split.seen_test), ACCEPT_SYNTH)))
    # the learnability bar must sit below what a linear decoder reaches
    ok = oracle >= 0.5 and oracle > HELDOUT_PCC
    assert record("6 (oracle)", ok, f"least-squares envelope oracle held-out PCC {oracle:.3f}")


@pytest.mark.slow
def test_criterion_7_latent_loss_ablation(synthetic):
    full = [_run(synthetic, s)["pcc"] for s in SEEDS]
    no_lf = [_run(synthetic, s, use_lf=False)["pcc"] for s in SEEDS]
    ok = np.mean(no_lf) <= np.mean(full) + ABLATION_MARGIN
    assert record(7, ok, (
        f"held-out PCC full {np.mean(full):.3f} ({', '.join(f'{p:.3f}' for p in full)}) vs "
        f"no L_lf {np.mean(no_lf):.3f} ({', '.join(f'{p:.3f}' for p in no_lf)})"
    ))


# ---------------------------------------------------------------- 8


def test_criterion_8_determinism_and_persistence(tiny_split, tmp_path):
    sums, histories = [], []
    for name in ("a", "b"):
        cfg = tr.tiny_config(epochs=2, lr0=1e-3, out_dir=str(tmp_path / name))
        ck = tr.train(tiny_split, cfg)
        sums.append(parameter_checksum(ck.build_model()))
        histories.append((tmp_path / name / "history.csv").read_bytes())
    deterministic = sums[0] == sums[1] and histories[0] == histories[1]

    ex = tr.load_examples(tiny_split.unseen_test, cfg)[0]
    live = ck.build_model().synthesize(ex.ecog.numpy(), ex.mel.shape[0])
    loaded = tr.load_checkpoint(tmp_path / "b" / "last.pt").build_model()
    reloaded = loaded.synthesize(ex.ecog.numpy(), ex.mel.shape[0])
    roundtrip = live.tobytes() == reloaded.tobytes()

    dataio.write_mel(live, tmp_path / "x.melbin")
    exchange = dataio.read_mel(tmp_path / "x.melbin").values.tobytes() == live.astype(np.float32).tobytes()
    assert record(8, deterministic and roundtrip and exchange,
                  f"identical runs {deterministic}, checkpoint round trip {roundtrip}, melbin round trip {exchange}")
