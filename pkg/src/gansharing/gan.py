"""DCGAN and WGAN-GP generators/discriminators, losses, training and sampling."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffmath as dm
from .diffmath import functional as F
from .diffmath import layers as L
from .diffmath.tensor import NonFiniteError, Tensor, no_grad
from .patchlab import NON_HEALTHY, PatchRecord

log = logging.getLogger(__name__)

LATENT_DIM = 100
PROB_GUARD = 1e-7
VARIANTS = ("dcgan", "wgan_gp")


class TrainingDivergence(FloatingPointError):
    pass


@dataclass
class GanConfig:
    variant: str = "dcgan"
    image_side: int = 64
    batch_size: int = 16
    epochs: int = 3000
    label_smooth_range: tuple | None = (0.8, 1.1)
    critic_steps: int | None = None
    lambda_gp: float | None = None
    checkpoint_every: int = 50
    checkpoint_start: int = 500
    flip_p_horizontal: float = 0.5
    flip_p_vertical: float = 0.5
    base_channels: int = 32
    latent_dim: int = LATENT_DIM
    learning_rate: float | None = None
    beta1: float | None = None
    beta2: float | None = None
    diversity_samples: int = 64

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "dcgan":
            if self.critic_steps is not None or self.lambda_gp is not None:
                raise ValueError("critic_steps / lambda_gp only apply to wgan_gp")
            self.label_smooth_range = tuple(self.label_smooth_range or (0.8, 1.1))
            self.learning_rate = 2e-4 if self.learning_rate is None else self.learning_rate
            self.beta1 = 0.5 if self.beta1 is None else self.beta1
            self.beta2 = 0.999 if self.beta2 is None else self.beta2
        else:
            if self.label_smooth_range is not None and tuple(self.label_smooth_range) != (0.8, 1.1):
                raise ValueError("label_smooth_range only applies to dcgan")
            self.label_smooth_range = None
            self.critic_steps = 5 if self.critic_steps is None else self.critic_steps
            self.lambda_gp = 10.0 if self.lambda_gp is None else self.lambda_gp
            self.learning_rate = 1e-4 if self.learning_rate is None else self.learning_rate
            self.beta1 = 0.0 if self.beta1 is None else self.beta1
            self.beta2 = 0.9 if self.beta2 is None else self.beta2
        side = self.image_side
        if side < 8 or side & (side - 1):
            raise ValueError(f"image_side must be a power of two >= 8, got {side}")

    def to_json(self) -> dict:
        d = asdict(self)
        if d["label_smooth_range"] is not None:
            d["label_smooth_range"] = list(d["label_smooth_range"])
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


# -- architectures ------------------------------------------------------------------
def generator_specs(side: int, c: int = 32, latent_dim: int = LATENT_DIM) -> list:
    """z -> 4x4x(8c) -> stride-2 transposed convs halving channels -> 1 x side x side, tanh."""
    stages = int(math.log2(side // 4))
    ch = c * 2 ** (stages - 1) if stages > 1 else c
    specs = [L.reshape((latent_dim, 1, 1)), L.conv2d_transpose(latent_dim, ch, 4, 1, 0, bias=False),
             L.batchnorm2d(ch), L.relu()]
    for _ in range(stages - 1):
        specs += [L.conv2d_transpose(ch, ch // 2, 4, 2, 1, bias=False), L.batchnorm2d(ch // 2), L.relu()]
        ch //= 2
    specs += [L.conv2d_transpose(ch, 1, 4, 2, 1), L.tanh()]
    return specs


def discriminator_specs(side: int, c: int = 32, variant: str = "dcgan") -> list:
    """Mirror of the generator with 6x6 stride-2 convs and leaky ReLU(0.2).

    The WGAN-GP critic drops every batchnorm and the sigmoid head.
    """
    stages = int(math.log2(side // 4))
    specs, ch_in, ch = [], 1, c
    for i in range(stages):
        specs.append(L.conv2d(ch_in, ch, 6, 2, 2, bias=(variant != "dcgan" or i == 0)))
        if variant == "dcgan" and i > 0:
            specs.append(L.batchnorm2d(ch))
        specs.append(L.leaky_relu(0.2))
        ch_in, ch = ch, ch * 2
    specs += [L.flatten(), L.linear(ch_in * 16, 1)]
    if variant == "dcgan":
        specs.append(L.sigmoid())
    return specs


# -- losses -------------------------------------------------------------------------------
def _guard_probs(p: Tensor, what: str) -> Tensor:
    if (p.data < 0).any() or (p.data > 1).any():
        raise ValueError(f"{what}: probabilities outside [0, 1]")
    return F.clip(p, PROB_GUARD, 1 - PROB_GUARD)


def dcgan_losses(d_real: Tensor, d_fake_detached: Tensor, d_fake_live: Tensor, smooth_labels):
    """(loss_D, loss_G) with one-sided smoothed real targets and a non-saturating generator loss.

    loss_D = -mean[t * log D(x) + log(1 - D(G(z)))],  loss_G = -mean[log D(G(z))].
    """
    real = F.reshape(_guard_probs(d_real, "D(x)"), (-1,))
    fake = F.reshape(_guard_probs(d_fake_detached, "D(G(z)) detached"), (-1,))
    t = Tensor(np.asarray(smooth_labels, dtype=real.dtype).reshape(-1))
    if t.shape != real.shape or fake.shape != real.shape:
        raise ValueError("real/fake outputs and smoothing targets must share one batch size")
    loss_d = -F.mean(t * F.log(real) + F.log(1.0 - fake))
    loss_g = None
    if d_fake_live is not None:
        live = F.reshape(_guard_probs(d_fake_live, "D(G(z)) live"), (-1,))
        loss_g = -F.mean(F.log(live))
    return loss_d, loss_g


def wgan_gp_loss(critic, real_batch: Tensor, fake_batch: Tensor, lambda_gp: float, rng: np.random.Generator,
                 mode: str = "train"):
    """(loss_critic, gp_term, loss_G) with the penalty taken at random interpolates.

    The penalty keeps its graph, so ``loss_critic.backward()`` differentiates
    through the input gradient into the critic parameters.
    """
    if real_batch.shape != fake_batch.shape:
        raise ValueError(f"real {real_batch.shape} and fake {fake_batch.shape} batches differ")
    n = real_batch.shape[0]
    eps = rng.uniform(0.0, 1.0, size=(n,) + (1,) * (real_batch.ndim - 1)).astype(real_batch.dtype)
    interp = Tensor(eps * real_batch.data + (1.0 - eps) * fake_batch.data, requires_grad=True)
    try:
        g = dm.grad_of_output_wrt_input(critic, interp, mode=mode)
        norms = F.sqrt(F.sum(g * g, axis=tuple(range(1, g.ndim))) + 1e-12)
        gp = F.mean((norms - 1.0) ** 2)
    except NonFiniteError as exc:
        raise TrainingDivergence(f"non-finite gradient norm in penalty: {exc}") from exc
    d_real = F.reshape(critic(real_batch, mode), (-1,))
    d_fake = F.reshape(critic(fake_batch, mode), (-1,))
    loss_c = F.mean(d_fake) - F.mean(d_real) + gp * lambda_gp
    loss_g = -F.mean(d_fake)
    return loss_c, gp, loss_g


# -- training -------------------------------------------------------------------------------
def random_flips(batch: np.ndarray, rng: np.random.Generator, p_h: float = 0.5, p_v: float = 0.5):
    """Independently flip each (N, 1, H, W) sample; returns (batch, h_flags, v_flags)."""
    n = batch.shape[0]
    fh = rng.random(n) < p_h
    fv = rng.random(n) < p_v
    out = batch.copy()
    out[fh] = out[fh][..., ::-1]
    out[fv] = out[fv][..., ::-1, :]
    return out, fh, fv


def checkpoint_epochs(config: GanConfig) -> list:
    if config.variant == "wgan_gp":
        return [config.epochs]
    eps = [e for e in range(config.checkpoint_start, config.epochs + 1, config.checkpoint_every)
           if e >= 1]
    return eps or [config.epochs]


@dataclass
class TrainedGan:
    gan_id: str
    centre_id: str
    config: GanConfig
    generator_specs: list
    checkpoints: dict  # epoch -> generator state dict
    history: dict = field(default_factory=dict)
    diversity: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    scope: str = "all_lesions"
    dtype: str = "float32"

    @property
    def checkpoint_list(self) -> list:
        return sorted(self.checkpoints)

    def generator(self, epoch: int | None = None) -> dm.Sequential:
        epoch = self.checkpoint_list[-1] if epoch is None else epoch
        net = dm.Sequential(self.generator_specs, np.random.default_rng(0), np.dtype(self.dtype))
        net.load_state_dict(self.checkpoints[epoch])
        return net


def _to_gan_range(patches: list, side: int, dtype=np.float32) -> np.ndarray:
    arr = np.stack([np.asarray(p.pixels, dtype=np.float64) for p in patches])
    if arr.shape[1:] != (side, side):
        raise ValueError(f"patches are {arr.shape[1:]}, GAN expects {side}x{side}")
    return (arr[:, None] * 2.0 - 1.0).astype(dtype)


def _mean_pairwise_l2(samples: np.ndarray) -> float:
    flat = samples.reshape(len(samples), -1).astype(np.float64)
    sq = (flat ** 2).sum(1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * flat @ flat.T, 0.0)
    iu = np.triu_indices(len(flat), 1)
    return float(np.sqrt(d2[iu]).mean()) if len(iu[0]) else 0.0


class _Trainer:
    def __init__(self, config: GanConfig, seed: int, dtype=np.float32):
        self.cfg = config
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng([seed, 0x6A4])
        init = np.random.default_rng([seed, 0x1417])
        self.g_specs = generator_specs(config.image_side, config.base_channels, config.latent_dim)
        self.G = dm.Sequential(self.g_specs, init, self.dtype)
        self.D = dm.Sequential(discriminator_specs(config.image_side, config.base_channels, config.variant),
                               init, self.dtype)
        mk = lambda: dm.adam(config.learning_rate, config.beta1, config.beta2)  # noqa: E731
        self.opt_g = dm.Optimizer(self.G.parameters(), mk())
        self.opt_d = dm.Optimizer(self.D.parameters(), mk())
        self.critic_updates = 0
        self.generator_updates = 0

    def latent(self, n: int) -> Tensor:
        return Tensor(self.rng.standard_normal((n, self.cfg.latent_dim)).astype(self.dtype))

    def dcgan_step(self, real: np.ndarray) -> dict:
        n = len(real)
        lo, hi = self.cfg.label_smooth_range
        t = self.rng.uniform(lo, hi, size=n)
        fake = self.G(self.latent(n), "train")
        self.opt_d.zero_grad()
        d_real = self.D(Tensor(real), "train")
        d_fake = self.D(fake.detach(), "train")
        loss_d, _ = dcgan_losses(d_real, d_fake, None, t)
        loss_d.backward()
        self.opt_d.step()
        self.critic_updates += 1

        self.opt_g.zero_grad()
        self.opt_d.zero_grad()
        d_live = self.D(fake, "train")
        _, loss_g = dcgan_losses(d_real.detach(), d_fake.detach(), d_live, t)
        loss_g.backward()
        self.opt_g.step()
        self.opt_d.zero_grad()
        self.generator_updates += 1
        return {"loss_d": loss_d.item(), "loss_g": loss_g.item(),
                "d_real": float(d_real.data.mean()), "d_fake": float(d_fake.data.mean())}

    def wgan_step(self, batches) -> dict:
        """``critic_steps`` critic updates (one batch each) then one generator update."""
        stats = []
        for _ in range(self.cfg.critic_steps):
            real = next(batches)
            fake = self.G(self.latent(len(real)), "train").detach()
            self.opt_d.zero_grad()
            loss_c, gp, _ = wgan_gp_loss(self.D, Tensor(real), fake, self.cfg.lambda_gp, self.rng)
            loss_c.backward()
            self.opt_d.step()
            self.critic_updates += 1
            w = float(loss_c.item() - self.cfg.lambda_gp * gp.item())
            stats.append((loss_c.item(), gp.item(), -w))
        self.opt_g.zero_grad()
        fake = self.G(self.latent(self.cfg.batch_size), "train")
        loss_g = -F.mean(self.D(fake, "train"))
        loss_g.backward()
        self.opt_g.step()
        self.opt_d.zero_grad()
        self.generator_updates += 1
        arr = np.asarray(stats)
        return {"loss_d": float(arr[:, 0].mean()), "gp": float(arr[:, 1].mean()),
                "wasserstein": float(arr[:, 2].mean()), "loss_g": loss_g.item()}


def _batch_stream(data: np.ndarray, batch_size: int, rng, cfg: GanConfig):
    while True:
        order = rng.permutation(len(data))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            if len(idx) < 2:
                continue
            flipped, _, _ = random_flips(data[idx], rng, cfg.flip_p_horizontal, cfg.flip_p_vertical)
            yield flipped


def train_gan(config: GanConfig, patches: list, seed: int, centre_id: str = "", scope: str = "all_lesions",
              gan_id: str | None = None, progress=None, dtype=np.float32) -> TrainedGan:
    """Train on lesion patches; returns generator checkpoints, loss curves and counters."""
    if not patches:
        raise ValueError("train_gan needs at least one patch")
    if any(p.label != NON_HEALTHY for p in patches):
        raise ValueError("GANs are trained on non_healthy (lesion) patches only")
    data = _to_gan_range(patches, config.image_side, dtype)
    bs = min(config.batch_size, len(data)) if len(data) >= 2 else 2
    if len(data) < 2:
        data = np.concatenate([data, data])
    tr = _Trainer(config, seed, dtype)
    save_at = set(checkpoint_epochs(config))
    n_batches = max(1, len(data) // bs)
    history: dict = {}
    checkpoints, diversity = {}, {}
    stream = _batch_stream(data, bs, tr.rng, config)
    probe = np.random.default_rng([seed, 0xD17]).standard_normal(
        (config.diversity_samples, config.latent_dim)).astype(tr.dtype)
    for epoch in range(1, config.epochs + 1):
        try:
            if config.variant == "dcgan":
                steps = [tr.dcgan_step(next(stream)) for _ in range(n_batches)]
            else:
                steps = [tr.wgan_step(stream) for _ in range(max(1, n_batches // config.critic_steps))]
        except (NonFiniteError, TrainingDivergence) as exc:
            raise TrainingDivergence(f"training diverged at epoch {epoch}: {exc}") from exc
        for key in steps[0]:
            history.setdefault(key, []).append(float(np.mean([s[key] for s in steps])))
        if epoch in save_at:
            checkpoints[epoch] = tr.G.state_dict()
            with no_grad():
                samples = tr.G(Tensor(probe), "eval").data
            diversity[epoch] = _mean_pairwise_l2(samples)
            log.info("event=checkpoint variant=%s epoch=%d diversity=%.4f", config.variant, epoch,
                     diversity[epoch])
        if progress is not None:
            progress(epoch, {k: v[-1] for k, v in history.items()})
    gid = gan_id or f"{centre_id or 'centre'}-{config.variant}-{scope}-s{seed}"
    return TrainedGan(gid, centre_id, config, [s.to_json() for s in tr.g_specs], checkpoints, history,
                      diversity, {"critic_updates": tr.critic_updates,
                                  "generator_updates": tr.generator_updates}, scope, tr.dtype.name)


def split_counts(count: int, parts: int) -> list:
    """Even split with the remainder going to the earliest parts."""
    base, rem = divmod(count, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def sample_synthetic(gan, count: int, seed: int, ensemble: bool = True, batch: int = 64) -> list:
    """Draw ``count`` non-healthy patches in [0, 1] from the stored checkpoint(s)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    epochs = sorted(gan.checkpoints)
    if not ensemble:
        epochs = epochs[-1:]
    kinds = ("mass",) if getattr(gan, "scope", "") == "masses_only" else ()
    records = []
    for epoch, n in zip(epochs, split_counts(count, len(epochs))):
        if n == 0:
            continue
        net = gan.generator(epoch)
        rng = np.random.default_rng([seed, epoch])
        for start in range(0, n, batch):
            k = min(batch, n - start)
            z = rng.standard_normal((k, net.specs[0].hp["shape"][0])).astype(net.dtype)
            with no_grad():
                out = net(Tensor(z), "eval").data[:, 0]
            for img in out:
                px = np.clip((img + 1.0) / 2.0, 0.0, 1.0).astype(np.float32)
                records.append(PatchRecord(
                    pixels=px, label=NON_HEALTHY, lesion_kinds=kinds, source_centre=gan.centre_id,
                    provenance={"type": "synthetic", "generator_id": gan.gan_id, "checkpoint_epoch": int(epoch)},
                    patient_id=f"synthetic:{gan.gan_id}", density_class=0))
    return records
