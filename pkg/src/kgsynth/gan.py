"""Conditional WGAN-GP with a knowledge-base cross-entropy penalty on the generator."""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, Adam, ParamSet, Tensor
from .encoder import CondSampler, RowEncoder
from .knowledge import rule_flags
from .privacy import Accountant, AccountantState, DpConfig, aggregate_noisy, clip_rows
from .schema import DataTable

log = logging.getLogger(__name__)

FITTED, INITIALIZED, BUDGET_EXHAUSTED = "fitted", "initialized", "budget_exhausted"


def substream(seed: int, name: str) -> np.random.Generator:
    """Named, independent RNG stream derived from a master seed."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 300
    batch_size: int = 500
    n_critic: int = 5
    gp_weight: float = 10.0
    rule_weight: float = 1.0
    tau: float = 0.2
    noise_dim: int = 128
    generator_hidden: tuple[int, ...] = (256, 256)
    critic_hidden: tuple[int, ...] = (256, 256)
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.9)
    seed: int = 0
    dp: DpConfig | None = None

    def __post_init__(self):
        if self.gp_weight < 0 or self.rule_weight < 0:
            raise ValueError("penalty weights must be nonnegative")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.n_critic < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("n_critic and batch_size must be >= 1, epochs >= 0")
        object.__setattr__(self, "generator_hidden", tuple(self.generator_hidden))
        object.__setattr__(self, "critic_hidden", tuple(self.critic_hidden))
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "dp"}
        d["generator_hidden"] = list(self.generator_hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        d["betas"] = list(self.betas)
        d["dp"] = self.dp.to_dict() if self.dp else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainingConfig:
        d = dict(d)
        dp = d.pop("dp", None)
        return cls(**d, dp=DpConfig(**dp) if dp else None)


# ---------------------------------------------------------------------------
# networks


class Generator:
    """MLP from (z, cond) to a row: tanh on alpha slots, Gumbel-softmax per categorical segment."""

    def __init__(self, encoder: RowEncoder, noise_dim: int, hidden=(256, 256)):
        self.noise_dim = noise_dim
        self.width = encoder.total_width
        self.bounds = encoder.softmax_bounds()
        self.alpha_cols = encoder.alpha_columns()
        self.mlp = MLP([noise_dim + encoder.cond_width, *hidden, self.width], "leaky_relu", prefix="g.")
        cat = np.zeros(self.width, dtype=bool)
        for s, e in self.bounds:
            cat[s:e] = True
        self.categorical = cat

    def init(self, rng) -> ParamSet:
        return self.mlp.init(rng)

    def forward(self, P, z, cond, tau: float, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
        """Returns (soft sample, per-segment log-probabilities of the clean logits)."""
        logits = self.mlp.forward(P, ad.concat([ad.const(z), ad.const(cond)]))
        B = logits.shape[0]
        u = rng.random((B, self.width))
        gumbel = np.where(self.categorical, -np.log(-np.log(np.clip(u, 1e-20, 1.0 - 1e-12))), 0.0)
        scale = np.where(self.categorical, 1.0 / tau, 1.0)
        y = ad.softmax_segments((logits + gumbel) * scale, self.bounds)
        y = ad.tanh_cols(y, self.alpha_cols)
        logp = ad.log_softmax_segments(logits, self.bounds)
        return y, logp


class Critic:
    """Unbounded scalar score of (row, cond)."""

    def __init__(self, encoder: RowEncoder, hidden=(256, 256)):
        self.data_width = encoder.total_width
        self.mlp = MLP([encoder.total_width + encoder.cond_width, *hidden, 1], "leaky_relu", prefix="c.")

    def init(self, rng) -> ParamSet:
        return self.mlp.init(rng)

    def score(self, P, x, cond) -> Tensor:
        return self.mlp.forward(P, ad.concat([_t(x), _t(cond)]))


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else ad.const(x)


def _flat(t: Tensor) -> Tensor:
    """(B, 1) -> (B,)"""
    return ad.sum(t, axis=1)


# ---------------------------------------------------------------------------
# losses


def gradient_penalty_rows(critic: Critic, P, real, fake, cond, u) -> Tensor:
    """Per-row (||d/dx D(x_hat, cond)||_2 - 1)^2 with x_hat = u real + (1 - u) fake."""
    real, fake = np.asarray(real), np.asarray(fake)
    u = np.asarray(u).reshape(-1, 1)
    x_hat = u * real + (1.0 - u) * fake
    inp = ad.const(np.concatenate([x_hat, cond], axis=1))
    _, g = critic.mlp.input_gradient(P, inp)
    gx = ad.slice_cols(g, 0, critic.data_width)
    norm = ad.sqrt(ad.row_sq_norm(gx) + 1e-12)
    return ad.square(norm - 1.0)


def gradient_penalty(critic: Critic, P, real, fake, cond, u) -> Tensor:
    return ad.mean(gradient_penalty_rows(critic, P, real, fake, cond, u))


def critic_loss_rows(critic: Critic, P, real, fake, cond, u, gp_weight: float) -> Tensor:
    """Per-example critic loss: D(fake) - D(real) + lambda * penalty at their interpolate."""
    d_fake = _flat(critic.score(P, fake, cond))
    d_real = _flat(critic.score(P, real, cond))
    loss = d_fake - d_real
    if gp_weight:
        loss = loss + gp_weight * gradient_penalty_rows(critic, P, real, fake, cond, u)
    return loss


def critic_loss(critic: Critic, P, real, fake, cond, u, gp_weight: float) -> Tensor:
    return ad.mean(critic_loss_rows(critic, P, real, fake, cond, u, gp_weight))


def rule_cross_entropy(logp: Tensor, targets: np.ndarray) -> Tensor:
    """Batch mean of sum over enforced one-hot targets of -log p."""
    return ad.mean(ad.sum(logp * (-targets), axis=1))


def generator_loss(critic: Critic, critic_params: ParamSet, fake: Tensor, logp: Tensor, cond: np.ndarray,
                   targets: np.ndarray, rule_weight: float) -> tuple[Tensor, Tensor]:
    """-mean D(fake, cond) + w * H(KG(cond)); critic parameters enter as constants."""
    Pc = {k: ad.const(v) for k, v in critic_params.items()}
    adv = ad.neg(ad.mean(critic.score(Pc, fake, cond)))
    ce = rule_cross_entropy(logp, targets)
    if rule_weight == 0:
        return adv, ce
    return adv + rule_weight * ce, ce


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    config: TrainingConfig
    generator: ParamSet
    critic: ParamSet
    gen_opt: dict = field(default_factory=dict)
    critic_opt: dict = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    critic_steps: int = 0
    accountant: AccountantState | None = None
    epsilon: float | None = None
    history: list[dict] = field(default_factory=list)
    status: str = INITIALIZED
    cond_counts: list[list[int]] = field(default_factory=list)


class Trainer:
    """Owns networks, optimisers and RNG streams for one training run."""

    def __init__(self, encoder: RowEncoder, config: TrainingConfig):
        self.encoder = encoder
        self.config = config
        self.gen = Generator(encoder, config.noise_dim, config.generator_hidden)
        self.critic = Critic(encoder, config.critic_hidden)
        self.targets = encoder.target_matrix()

    def init_state(self) -> TrainState:
        rng = substream(self.config.seed, "init")
        return TrainState(self.config, self.gen.init(rng), self.critic.init(rng))

    def fit(self, table: DataTable, callback=None) -> TrainState:
        cfg = self.config
        enc = self.encoder
        state = self.init_state()
        flags = rule_flags(table, enc.rules)
        data = enc.encode(table, substream(cfg.seed, "encode"), flags=flags)
        sampler = CondSampler(enc, data, log_frequency=True)
        state.cond_counts = [[int(c) for c in np.bincount(data[:, s.start:s.stop].argmax(axis=1), minlength=s.width)]
                             for s in enc.cond_segments]
        n = data.shape[0]
        rng = substream(cfg.seed, "train")
        g_opt = Adam(state.generator, cfg.lr, cfg.betas)
        c_opt = Adam(state.critic, cfg.lr, cfg.betas)
        dp = cfg.dp
        accountant = Accountant(dp.sampling_rate, dp.noise_multiplier) if dp else None
        steps_per_epoch = max(1, n // cfg.batch_size)
        Pg, Pc = state.generator, state.critic
        status = FITTED
        try:
            for epoch in range(cfg.epochs):
                for _ in range(steps_per_epoch):
                    for _ in range(cfg.n_critic):
                        if dp:
                            if dp.epsilon_ceiling is not None and \
                                    accountant.epsilon_after(1, dp.delta) > dp.epsilon_ceiling:
                                raise _BudgetExhausted
                            Pc, c_loss = self._private_critic_step(Pg, Pc, c_opt, data, rng, dp)
                            accountant.step()
                        else:
                            Pc, c_loss = self._critic_step(Pg, Pc, c_opt, data, sampler, rng)
                        state.critic_steps += 1
                    Pg, g_loss, ce = self._generator_step(Pg, Pc, g_opt, sampler, rng)
                    state.step += 1
                    state.history.append({"epoch": epoch, "step": state.step, "critic_loss": c_loss,
                                          "generator_loss": g_loss, "rule_loss": ce})
                state.epoch = epoch + 1
                state.generator, state.critic = Pg, Pc
                if callback is not None:
                    callback(state)
        except _BudgetExhausted:
            status = BUDGET_EXHAUSTED
            log.warning("privacy budget exhausted after %d critic steps", state.critic_steps)
        state.generator, state.critic = Pg, Pc
        state.gen_opt, state.critic_opt = g_opt.state(), c_opt.state()
        state.status = status
        if accountant is not None:
            state.accountant = accountant.state
            state.epsilon = accountant.epsilon(dp.delta)
        return state

    # -- steps ----------------------------------------------------------
    def _fake(self, Pg, cond, rng) -> np.ndarray:
        z = rng.standard_normal((cond.shape[0], self.config.noise_dim))
        y, _ = self.gen.forward({k: ad.const(v) for k, v in Pg.items()}, z, cond, self.config.tau, rng)
        return y.data

    def _critic_step(self, Pg, Pc, opt, data, sampler, rng):
        B = self.config.batch_size
        conds, rows = sampler.sample(B, rng)
        cond = self.encoder.cond_vectors(conds)
        fake = self._fake(Pg, cond, rng)
        u = rng.random(B)
        loss, grads = ad.value_and_grad(
            lambda P: critic_loss(self.critic, P, data[rows], fake, cond, u, self.config.gp_weight), Pc)
        return opt.step(Pc, grads), loss

    def _private_critic_step(self, Pg, Pc, opt, data, rng, dp: DpConfig):
        n = data.shape[0]
        picked = np.flatnonzero(rng.random(n) < dp.sampling_rate)
        lot = dp.sampling_rate * n
        if picked.size == 0:
            noisy = aggregate_noisy(np.zeros((1, Pc.size)), dp.clip_norm, dp.noise_multiplier, lot, rng)
            return opt.step(Pc, Pc.unflatten(noisy)), float("nan")
        real = data[picked]
        cond = self.encoder.cond_vectors(self._conds_from_rows(real, rng))
        fake = self._fake(Pg, cond, rng)
        u = rng.random(picked.size)
        losses, G = ad.per_example_grads(
            lambda P: critic_loss_rows(self.critic, P, real, fake, cond, u, self.config.gp_weight), Pc)
        clipped, _ = clip_rows(G, dp.clip_norm)
        assert np.all(np.linalg.norm(clipped, axis=1) <= dp.clip_norm * (1 + 1e-12))
        noisy = aggregate_noisy(clipped, dp.clip_norm, dp.noise_multiplier, lot, rng)
        return opt.step(Pc, Pc.unflatten(noisy)), float(losses.mean())

    def _conds_from_rows(self, rows: np.ndarray, rng) -> np.ndarray:
        segs = self.encoder.cond_segments
        pick = rng.integers(len(segs), size=rows.shape[0])
        out = np.empty(rows.shape[0], dtype=np.int64)
        for i, s in enumerate(segs):
            at = np.flatnonzero(pick == i)
            if at.size:
                out[at] = self.encoder.cond_offsets[s.source] + rows[at, s.start:s.stop].argmax(axis=1)
        return out

    def _generator_step(self, Pg, Pc, opt, sampler, rng):
        B = self.config.batch_size
        conds, _ = sampler.sample(B, rng, with_rows=False)
        cond = self.encoder.cond_vectors(conds)
        z = rng.standard_normal((B, self.config.noise_dim))
        targets = self.targets[conds]
        gen_rng = np.random.default_rng(rng.integers(2**63))
        holder = {}

        def loss_fn(P):
            y, logp = self.gen.forward(P, z, cond, self.config.tau, gen_rng)
            loss, ce = generator_loss(self.critic, Pc, y, logp, cond, targets, self.config.rule_weight)
            holder["ce"] = float(ce.data)
            return loss

        loss, grads = ad.value_and_grad(loss_fn, Pg)
        return opt.step(Pg, grads), loss, holder["ce"]


class _BudgetExhausted(Exception):
    pass


def train(table: DataTable, encoder: RowEncoder, config: TrainingConfig, callback=None) -> TrainState:
    """Fit the conditional WGAN-GP on a masked table."""
    return Trainer(encoder, config).fit(table, callback)


# ---------------------------------------------------------------------------
# sampling


def generate_encoded(state: TrainState, encoder: RowEncoder, n: int, seed: int,
                     cond_mode: str = "frequency", chunk: int = 2048, hard: str = "argmax") -> np.ndarray:
    """Hardened encoded rows: each categorical segment is an exact one-hot.

    ``hard="argmax"`` takes the argmax of the generator's clean segment logits;
    ``hard="gumbel"`` takes the argmax of the Gumbel-perturbed training-time output.
    """
    if hard not in ("argmax", "gumbel"):
        raise ValueError("hard must be 'argmax' or 'gumbel'")
    if n < 0:
        raise ValueError("n must be >= 0")
    cfg = state.config
    gen = Generator(encoder, cfg.noise_dim, cfg.generator_hidden)
    rng = substream(seed, "sample")
    segs = encoder.cond_segments
    probs = []
    for counts in state.cond_counts:
        c = np.asarray(counts, dtype=np.float64)
        w = np.log1p(c) if cond_mode == "log_frequency" else c
        probs.append(w / w.sum())
    P = {k: ad.const(v) for k, v in state.generator.items()}
    out = np.zeros((n, encoder.total_width))
    for start in range(0, n, chunk):
        b = min(chunk, n - start)
        pick = rng.integers(len(segs), size=b)
        conds = np.empty(b, dtype=np.int64)
        u = rng.random(b)
        for i, s in enumerate(segs):
            at = np.flatnonzero(pick == i)
            if at.size:
                cum = np.cumsum(probs[i])
                j = np.minimum(np.searchsorted(cum, u[at] * cum[-1], side="right"), s.width - 1)
                conds[at] = encoder.cond_offsets[s.source] + j
        cond = encoder.cond_vectors(conds)
        z = rng.standard_normal((b, cfg.noise_dim))
        y, logp = gen.forward(P, z, cond, cfg.tau, rng)
        src = y.data if hard == "gumbel" else np.where(gen.categorical, logp.data, y.data)
        out[start:start + b] = harden(src, encoder)
        out[start:start + b, ~gen.categorical] = y.data[:, ~gen.categorical]
    return out


def harden(y: np.ndarray, encoder: RowEncoder) -> np.ndarray:
    out = y.copy()
    for s, e in encoder.softmax_bounds():
        idx = y[:, s:e].argmax(axis=1)
        out[:, s:e] = 0.0
        out[np.arange(len(y)), s + idx] = 1.0
    return out


def sample_synthetic(state: TrainState, encoder: RowEncoder, n: int, seed: int,
                     cond_mode: str = "frequency", hard: str = "argmax") -> DataTable:
    """n decoded rows in the raw column vocabulary (mask groups materialised)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    enc = generate_encoded(state, encoder, n, seed, cond_mode, hard=hard)
    return encoder.decode(enc, substream(seed, "decode"))


def export_history(state: TrainState, path=None) -> str:
    """Loss history as CSV text (one row per generator step)."""
    cols = ("epoch", "step", "critic_loss", "generator_loss", "rule_loss")
    lines = [",".join(cols)] + [",".join(repr(h[c]) for c in cols) for h in state.history]
    text = "\n".join(lines) + "\n"
    if path is not None:
        from pathlib import Path
        Path(path).write_text(text, encoding="utf-8")
    return text
