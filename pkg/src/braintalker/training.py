"""Losses, learning-rate schedule, the training loop and checkpoints."""

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .dataio import CorpusSplit, DataError, read_recording
from .dsp import mel_spectrogram
from .extractor import ExtractorSpec, parameter_checksum
from .model import EcogMelModel, prepare_ecog, target_frames_for

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = ("epoch", "lr", "L_mel", "L_lf", "L_tot", "val_L_mel")


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_mel: float = 1.0
    lambda_lf: float = 1.0
    use_lf: bool = True
    lr0: float = 5e-5
    lr_decay: float = 0.9
    lr_step_epochs: int = 100
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 1000
    mel_bins: int = 13
    channels: int = 8
    extractor: ExtractorSpec = field(default_factory=ExtractorSpec)
    d_model: int = 256
    heads: int = 4
    ffn_dim: int = 1024
    fft_blocks: int = 8
    leaky_slope: float = 0.1
    seed: int = 0
    unseen_word: Optional[str] = None
    heldout_trial: int = 0
    batch_size: int = 1
    shuffle_pairs: bool = False
    checkpoint_every: int = 100
    out_dir: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.extractor, dict):
            self.extractor = ExtractorSpec(**self.extractor)
        self.betas = tuple(self.betas)
        if self.lambda_mel < 0 or self.lambda_lf < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.mel_bins not in (13, 80):
            raise ValueError(f"mel_bins must be 13 or 80, got {self.mel_bins}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        ext = d.get("extractor")
        if isinstance(ext, dict):
            ext_known = {f.name for f in dataclasses.fields(ExtractorSpec)}
            bad = sorted(set(ext) - ext_known)
            if bad:
                raise ValueError(f"unknown config key(s): {', '.join('extractor.' + k for k in bad)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- losses

def _l2(a: torch.Tensor, b: torch.Tensor, what: str) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.linalg.vector_norm(a - b)


def mel_loss(pred, target) -> torch.Tensor:
    """Euclidean norm of the flattened difference of two mel-spectrograms."""
    return _l2(torch.as_tensor(pred), torch.as_tensor(target), "mel_loss")


def latent_feature_loss(c, s) -> torch.Tensor:
    return _l2(torch.as_tensor(c), torch.as_tensor(s), "latent_feature_loss")


def total_loss(l_mel, l_lf, config: TrainConfig):
    lam_lf = config.lambda_lf if config.use_lf else 0.0
    return config.lambda_mel * l_mel + lam_lf * l_lf


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return config.lr0 * config.lr_decay ** (epoch // config.lr_step_epochs)


# ---------------------------------------------------------------- data

@dataclass
class Example:
    id: str
    ecog: torch.Tensor  # (channels, samples @16 kHz), conditioned
    speech: torch.Tensor  # (samples,)
    mel: torch.Tensor  # (frames, bins)


def load_examples(entries, config: TrainConfig, dtype=torch.float32) -> list:
    out = []
    for e in entries:
        ecog, speech = read_recording(e, channels=config.channels)
        x = prepare_ecog(ecog)
        n = min(x.shape[1], speech.samples.shape[0])
        if abs(x.shape[1] - speech.samples.shape[0]) > 320:
            raise DataError(
                f"entry {e.id!r}: ECoG lasts {ecog.duration:.3f} s but speech lasts {speech.duration:.3f} s"
            )
        mel = mel_spectrogram(speech, config.mel_bins).values
        out.append(Example(
            e.id,
            torch.as_tensor(x[:, :n], dtype=dtype),
            torch.as_tensor(speech.samples[:n], dtype=dtype),
            torch.as_tensor(mel[: target_frames_for(n)], dtype=dtype),
        ))
    return out


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model_state: dict
    config: TrainConfig
    epoch: int = 0
    optimizer_state: Optional[dict] = None
    rng_state: Optional[dict] = None
    history: list = field(default_factory=list)
    best_val: float = math.inf
    best_epoch: int = -1
    best_state: Optional[dict] = None
    extractor_checksum: Optional[str] = None
    version: int = CHECKPOINT_VERSION

    def build_model(self, best: bool = False) -> EcogMelModel:
        model = EcogMelModel(self.config)
        state = self.best_state if best and self.best_state is not None else self.model_state
        model.load_state_dict(state)
        model.eval()
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    blob = dataclasses.asdict(ckpt) | {"config": ckpt.config.to_dict()}
    # asdict deep-copies tensors; keep the original state dicts instead
    blob["model_state"] = ckpt.model_state
    blob["best_state"] = ckpt.best_state
    blob["optimizer_state"] = ckpt.optimizer_state
    tmp = path.with_name(path.name + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, expect: Optional[TrainConfig] = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if not isinstance(blob, dict):
            raise TypeError("not a checkpoint dictionary")
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = blob.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {version}, this build reads version {CHECKPOINT_VERSION}"
        )
    blob["config"] = TrainConfig.from_dict(blob["config"])
    ckpt = Checkpoint(**blob)
    if expect is not None and expect.mel_bins != ckpt.config.mel_bins:
        raise CheckpointError(
            f"checkpoint was trained for {ckpt.config.mel_bins} mel bins, run is configured for {expect.mel_bins}"
        )
    return ckpt


def _rng_state(order_rng: np.random.Generator) -> dict:
    return {"torch": torch.get_rng_state(), "order": order_rng.bit_generator.state}


def _clone_state(model) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


# ---------------------------------------------------------------- training

def _stack(examples, attr):
    return torch.stack([getattr(e, attr) for e in examples])


def forward_losses(model: EcogMelModel, batch, config: TrainConfig, z=None, s=None):
    """Batch-mean (L_mel, L_lf, L_tot); each utterance contributes its own L2 norms."""
    mel_t = _stack(batch, "mel")
    out = model(_stack(batch, "ecog"), mel_t.shape[1], speech=_stack(batch, "speech"), z=z, s=s)
    l_mel = torch.stack([mel_loss(p, t) for p, t in zip(out.mel, mel_t)]).mean()
    l_lf = torch.stack([latent_feature_loss(c, s_) for c, s_ in zip(out.c, out.s)]).mean()
    return l_mel, l_lf, total_loss(l_mel, l_lf, config)


@torch.no_grad()
def evaluate_mel_loss(model: EcogMelModel, examples, cache=None) -> float:
    """Mean per-utterance mel loss."""
    if not examples:
        return float("nan")
    was_training = model.training
    model.eval()
    total = 0.0
    for i, ex in enumerate(examples):
        z = cache[i][0][None] if cache else None
        mel = model(ex.ecog[None], ex.mel.shape[0], z=z).mel[0]
        total += float(mel_loss(mel, ex.mel))
    model.train(was_training)
    return total / len(examples)


@torch.no_grad()
def _frozen_cache(model: EcogMelModel, examples):
    return [(model.coarse(ex.ecog[None])[0], model.speech_latent(ex.speech[None])[0]) for ex in examples]


def _length_key(ex: Example):
    return (ex.ecog.shape[-1], ex.mel.shape[0])


def make_batches(order, examples, batch_size: int) -> list:
    """Chunk a shuffled order into batches of equal-length utterances (order-preserving buckets)."""
    batches, buckets = [], {}
    for i in order:
        bucket = buckets.setdefault(_length_key(examples[i]), [])
        bucket.append(int(i))
        if len(bucket) == batch_size:
            batches.append(list(bucket))
            bucket.clear()
    batches.extend(b for b in buckets.values() if b)
    return batches


def shuffled_pairs(examples, seed: int) -> list:
    """Control corpus: every ECoG input is paired with the speech of another equal-length trial."""
    rng = np.random.default_rng(seed)
    out = list(examples)
    groups = {}
    for i, ex in enumerate(examples):
        groups.setdefault(_length_key(ex), []).append(i)
    for idx in groups.values():
        perm = rng.permutation(idx)
        for i, j in zip(idx, perm):
            out[i] = Example(examples[i].id, examples[i].ecog, examples[j].speech, examples[j].mel)
    return out


def write_history(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], repr(r["lr"])] + [
                "" if r.get(k) is None else repr(r[k]) for k in HISTORY_COLUMNS[2:]
            ])
    return path


def train(corpus: CorpusSplit, config: TrainConfig, resume: Optional[Checkpoint] = None,
          examples: Optional[tuple] = None, max_steps: Optional[int] = None,
          on_epoch=None) -> Checkpoint:
    """Train encoder + mel generator (and a trainable scratch extractor) on ``corpus.train``.

    ``examples`` may pass preloaded ``(train, val)`` example lists. ``max_steps``
    stops after that many optimizer steps. ``on_epoch(epoch, model, row)`` is
    called after every epoch's validation. Returns the final checkpoint;
    ``best_state`` holds the weights with the lowest seen-test mel loss.
    """
    if not corpus.train:
        raise TrainingError("the training split is empty")
    torch.manual_seed(config.seed)
    order_rng = np.random.default_rng(config.seed)

    if examples is None:
        train_ex = load_examples(corpus.train, config)
        val_ex = load_examples(corpus.seen_test, config)
    else:
        train_ex, val_ex = examples
    if not train_ex:
        raise TrainingError("the training split is empty")
    if config.shuffle_pairs:
        train_ex = shuffled_pairs(train_ex, config.seed + 1)

    model = EcogMelModel(config)
    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=config.lr0,
                                 betas=config.betas, eps=config.adam_eps)
    history, start_epoch = [], 0
    best_val, best_epoch, best_state = math.inf, -1, None
    if resume is not None:
        model.load_state_dict(resume.model_state)
        optimizer.load_state_dict(resume.optimizer_state)
        torch.set_rng_state(resume.rng_state["torch"])
        order_rng.bit_generator.state = resume.rng_state["order"]
        history = list(resume.history)
        start_epoch = resume.epoch
        best_val, best_epoch, best_state = resume.best_val, resume.best_epoch, resume.best_state

    frozen = not model.extractor_trainable
    extractor_sum = parameter_checksum(model.extractor) if frozen else None
    train_cache = _frozen_cache(model, train_ex) if frozen else None
    val_cache = _frozen_cache(model, val_ex) if frozen else None

    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2))

    def snapshot(epoch):
        return Checkpoint(
            model_state=_clone_state(model), config=config, epoch=epoch,
            optimizer_state=optimizer.state_dict(), rng_state=_rng_state(order_rng),
            history=list(history), best_val=best_val, best_epoch=best_epoch,
            best_state=best_state, extractor_checksum=extractor_sum,
        )

    last_good, steps, epoch = None, 0, start_epoch
    while epoch < config.epochs and (max_steps is None or steps < max_steps):
        lr = lr_at(epoch, config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        sums, count = np.zeros(3), 0
        order = order_rng.permutation(len(train_ex))
        for idx in make_batches(order, train_ex, config.batch_size):
            batch = [train_ex[i] for i in idx]
            z = s = None
            if frozen:
                z = torch.stack([train_cache[i][0] for i in idx])
                s = torch.stack([train_cache[i][1] for i in idx])
            l_mel, l_lf, l_tot = forward_losses(model, batch, config, z=z, s=s)
            if not torch.isfinite(l_tot):
                hint = f"; last good checkpoint: {last_good}" if last_good else ""
                raise TrainingError(f"non-finite loss at epoch {epoch} (batch {[e.id for e in batch]}){hint}")
            optimizer.zero_grad(set_to_none=True)
            l_tot.backward()
            optimizer.step()
            sums += np.array([l_mel.item(), l_lf.item(), l_tot.item()]) * len(idx)
            count += len(idx)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        val = evaluate_mel_loss(model, val_ex, val_cache)
        history.append({
            "epoch": epoch, "lr": lr,
            "L_mel": float(sums[0] / count),
            "L_lf": float(sums[1] / count) if config.use_lf else None,
            "L_tot": float(sums[2] / count),
            "val_L_mel": val,
        })
        log.info("epoch %d lr %.3g L_mel %.4f L_tot %.4f val_L_mel %.4f",
                 epoch, lr, sums[0] / count, sums[2] / count, val)
        if on_epoch is not None:
            on_epoch(epoch, model, history[-1])
        if val < best_val:
            best_val, best_epoch, best_state = val, epoch, _clone_state(model)
        epoch += 1
        if out_dir is not None:
            write_history(history, out_dir / "history.csv")
            if epoch % config.checkpoint_every == 0:
                last_good = save_checkpoint(snapshot(epoch), out_dir / "last.pt")

    if frozen and parameter_checksum(model.extractor) != extractor_sum:
        raise TrainingError("frozen extractor parameters changed during training")
    final = snapshot(epoch)
    if out_dir is not None:
        save_checkpoint(final, out_dir / "last.pt")
        if best_state is not None:
            save_checkpoint(dataclasses.replace(final, model_state=best_state), out_dir / "best.pt")
    return final


# ---------------------------------------------------------------- gradient check

def tiny_config(**overrides) -> TrainConfig:
    """A configuration small enough for finite-difference checks (2 channels, width 16, 2 blocks)."""
    base = dict(
        channels=2, d_model=16, heads=2, ffn_dim=16, fft_blocks=2,
        extractor=ExtractorSpec(dim=16, n_blocks=2, ffn_dim=16, heads=2, conv_dim=4),
    )
    return TrainConfig(**(base | overrides))


def gradient_check(model: EcogMelModel, batch, config: TrainConfig, eps: float = 1e-6) -> dict:
    """Compare autograd with central differences of L_tot for every trainable tensor.

    S is computed once and held fixed, matching the stop-gradient used in
    training. Returns ``{name: relative error}`` with the error of a tensor
    defined as ``|g - g_fd|_2 / max(|g|_2 + |g_fd|_2, 1e-12)``.
    """
    s = torch.stack([model.speech_latent(e.speech[None])[0] for e in batch])

    def loss():
        return forward_losses(model, batch, config, s=s)[2]

    model.zero_grad(set_to_none=True)
    loss().backward()
    errors = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            if not p.requires_grad:
                continue
            analytic = p.grad.detach().clone()
            numeric = torch.zeros_like(p)
            flat, nflat = p.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss().item()
                flat[i] = orig - eps
                down = loss().item()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * eps)
            denom = max(float(analytic.norm() + numeric.norm()), 1e-12)
            errors[name] = float((analytic - numeric).norm()) / denom
    return errors
