"""Attention-based multiple-instance classifier over artery and myocardium encodings.

Each artery encoding passes through the shared ``fcn_art`` network; the
myocardium features pass once through ``fcn_myo``.  Instance ``n`` is
``fcn_art(artery_n) ++ fcn_myo(myo)``; attention weights
``softmax_n(w . tanh(V h_n))`` pool the instances and a sigmoid head gives
the patient probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Adam,
    Dense,
    Dropout,
    Module,
    Parameter,
    PReLU,
    Tensor,
    TrainConfig,
    backward,
    bce_loss,
    concat,
    no_grad,
    softmax,
)

ARTERY_FEATURES = 1024
MYO_FEATURES = 512
HIDDEN = 64
ATTENTION = 32

MODES = ("combined", "arteries", "myo")
_MODE_ALIASES = {"arteries_only": "arteries", "myo_only": "myo", "myocardium": "myo"}


def canonical_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return mode


@dataclass
class Bag:
    """One patient: ``N x 1024`` artery encodings, 512 myocardium features, binary label."""

    arteries: np.ndarray
    myo: np.ndarray
    label: int = 0
    patient_id: str = ""

    def __post_init__(self):
        self.arteries = np.asarray(self.arteries)
        self.myo = np.asarray(self.myo).reshape(-1)
        if self.arteries.ndim != 2 or len(self.arteries) < 1:
            raise ValueError(f"bag needs at least one artery, got shape {self.arteries.shape}")

    @property
    def n(self) -> int:
        return len(self.arteries)


class FCN(Module):
    """Three 64-unit dense layers with PReLU, dropout between them."""

    def __init__(self, n_in: int, rng: np.random.Generator, dropout: float, dtype):
        self.layers = [Dense(n_in, HIDDEN, rng, dtype), Dense(HIDDEN, HIDDEN, rng, dtype), Dense(HIDDEN, HIDDEN, rng, dtype)]
        self.acts = [PReLU(HIDDEN, dtype=dtype) for _ in range(3)]
        self.drops = [Dropout(dropout, rng), Dropout(dropout, rng)]

    def forward(self, x):
        for i in range(3):
            x = self.acts[i](self.layers[i](x))
            if i < 2:
                x = self.drops[i](x)
        return x


class MilModel(Module):
    def __init__(self, mode: str = "combined", seed: int = 0, dropout: float = 0.5, dtype=np.float32,
                 artery_features: int = ARTERY_FEATURES, myo_features: int = MYO_FEATURES):
        self.mode = canonical_mode(mode)
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.fcn_art = FCN(artery_features, rng, dropout, dtype) if self.mode != "myo" else None
        self.fcn_myo = FCN(myo_features, rng, dropout, dtype) if self.mode != "arteries" else None
        width = HIDDEN * (2 if self.mode == "combined" else 1)
        self.width = width
        self.attn_V = Parameter((rng.standard_normal((ATTENTION, width)) * np.sqrt(1.0 / width)).astype(dtype))
        self.attn_w = Parameter((rng.standard_normal(ATTENTION) * np.sqrt(1.0 / ATTENTION)).astype(dtype))
        self.head = Dense(width, 1, rng, dtype)
        self.art_mean = np.zeros(artery_features, dtype)
        self.art_scale = np.ones(artery_features, dtype)
        self.myo_mean = np.zeros(myo_features, dtype)
        self.myo_scale = np.ones(myo_features, dtype)

    # -- input standardisation (fixed at training start, not trained) -------------
    def fit_normalization(self, bags: list[Bag]) -> None:
        arts = np.concatenate([b.arteries for b in bags]).astype(np.float64)
        myo = np.stack([b.myo for b in bags]).astype(np.float64)
        self.art_mean, self.art_scale = arts.mean(0).astype(self.dtype), np.maximum(arts.std(0), 1e-6).astype(self.dtype)
        self.myo_mean, self.myo_scale = myo.mean(0).astype(self.dtype), np.maximum(myo.std(0), 1e-6).astype(self.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = super().state_dict()
        state.update({
            "norm.art_mean": self.art_mean.copy(), "norm.art_scale": self.art_scale.copy(),
            "norm.myo_mean": self.myo_mean.copy(), "norm.myo_scale": self.myo_scale.copy(),
            "meta.mode": np.array(MODES.index(self.mode), dtype=np.int64),
        })
        return state

    def load_state_dict(self, state, strict: bool = True) -> None:
        if "meta.mode" in state and MODES[int(state["meta.mode"])] != self.mode:
            raise ValueError(f"checkpoint mode {MODES[int(state['meta.mode'])]} != model mode {self.mode}")
        super().load_state_dict({k: v for k, v in state.items() if not k.startswith(("norm.", "meta.", "optim.", "train."))}, strict)
        for k in ("art_mean", "art_scale", "myo_mean", "myo_scale"):
            if f"norm.{k}" in state:
                setattr(self, k, np.asarray(state[f"norm.{k}"], dtype=self.dtype).copy())

    @classmethod
    def from_checkpoint(cls, state: dict[str, np.ndarray], dtype=np.float32) -> MilModel:
        model = cls(MODES[int(state["meta.mode"])], dtype=dtype)
        model.load_state_dict(state)
        return model.eval()

    # -- forward ----------------------------------------------------------------------
    def embed_instances(self, bag: Bag) -> Tensor:
        """``N x width`` instance matrix (artery half first in combined mode)."""
        parts = []
        if self.mode != "myo":
            art = (bag.arteries.astype(self.dtype) - self.art_mean) / self.art_scale
            parts.append(self.fcn_art(Tensor(art)))
        if self.mode != "arteries":
            myo = ((bag.myo.astype(self.dtype) - self.myo_mean) / self.myo_scale)[None]
            m = self.fcn_myo(Tensor(myo))
            if self.mode == "combined":
                m = m + np.zeros((bag.n, HIDDEN), dtype=self.dtype)
            parts.append(m)
        return parts[0] if len(parts) == 1 else concat(parts, axis=1)

    def attention_pool(self, instances: Tensor) -> tuple[Tensor, Tensor]:
        """``(bag embedding [width], weights [N])``; weights are a softmax so they sum to 1."""
        if instances.shape[1] != self.width:
            raise ValueError(f"instances have width {instances.shape[1]}, attention expects {self.width}")
        hidden = (instances @ self.attn_V.T).tanh()
        scores = (hidden @ self.attn_w.reshape(ATTENTION, 1)).reshape(-1)
        weights = softmax(scores)
        pooled = (weights.reshape(1, -1) @ instances).reshape(-1)
        return pooled, weights

    def forward(self, bag: Bag) -> tuple[Tensor, Tensor]:
        """``(probability, attention weights)``."""
        pooled, weights = self.attention_pool(self.embed_instances(bag))
        prob = self.head(pooled).sigmoid().reshape(())
        return prob, weights

    def predict(self, bag: Bag) -> float:
        was = self.training
        self.eval()
        with no_grad():
            p = self(bag)[0].item()
        self.train(was)
        return p


def embed_instances(arteries: np.ndarray, myo: np.ndarray, model: MilModel) -> np.ndarray:
    with no_grad():
        return model.embed_instances(Bag(arteries, myo)).data


def attention_pool(instances: np.ndarray, model: MilModel) -> tuple[np.ndarray, np.ndarray]:
    with no_grad():
        pooled, w = model.attention_pool(Tensor(np.asarray(instances, dtype=model.dtype)))
    return pooled.data, w.data


def classify_patient(bag: Bag, model: MilModel, mode: str | None = None) -> float:
    """Inference-mode probability that the patient is positive (FFR <= 0.8)."""
    if mode is not None and canonical_mode(mode) != model.mode:
        raise ValueError(f"model was built for mode {model.mode!r}, not {mode!r}")
    return model.predict(bag)


def checkpoint_iterations(iterations: int, interval: int) -> list[int]:
    """Iterations at which a snapshot is taken."""
    if interval <= 0 or iterations <= 0 or iterations % interval:
        raise ValueError(f"checkpoint interval {interval} must evenly divide iterations {iterations}")
    return list(range(interval, iterations + 1, interval))


def train_mil(bags: list[Bag], cfg: TrainConfig, mode: str = "combined", keep_optimizer: bool = True) -> list[dict[str, np.ndarray]]:
    """Train with one patient per step and shuffled epochs; returns one snapshot per checkpoint interval.

    Each snapshot holds parameters, normalization buffers, optimizer moments
    (if ``keep_optimizer``) and ``train.iteration``.
    """
    if not bags:
        raise ValueError("empty training set")
    snaps_at = set(checkpoint_iterations(cfg.iterations, cfg.checkpoint_interval))
    rng = np.random.default_rng(cfg.seed)
    model = MilModel(mode, seed=int(rng.integers(2**63)), dropout=cfg.dropout, dtype=cfg.dtype)
    model.fit_normalization(bags)
    model.train()
    params = model.parameters()
    opt = Adam.from_config(params, cfg)
    labels = np.array([b.label for b in bags], dtype=cfg.dtype)
    order = rng.permutation(len(bags))
    pos = 0
    snapshots = []
    for it in range(1, cfg.iterations + 1):
        if pos == len(order):
            order, pos = rng.permutation(len(bags)), 0
        i = order[pos]
        pos += 1
        opt.zero_grad()
        prob, _ = model(bags[i])
        backward(bce_loss(prob, labels[i]))
        opt.step()
        if it in snaps_at:
            snap = model.state_dict()
            if keep_optimizer:
                snap.update(opt.state_dict())
            snap["train.iteration"] = np.array(it, dtype=np.int64)
            snapshots.append(snap)
    return snapshots


def predict_bags(state: dict[str, np.ndarray], bags: list[Bag], dtype=np.float32) -> np.ndarray:
    model = MilModel.from_checkpoint(state, dtype=dtype)
    with no_grad():
        return np.array([model(b)[0].item() for b in bags])
