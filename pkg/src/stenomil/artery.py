"""Two-stage artery encoding: patch VCAE (40x40x5 -> 16) then sequence CAE (800 -> 64 per row)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .synthgen import CROSS_SECTION, MAX_LENGTH, MprVolume
from .tensor import (
    Adam,
    Conv1d,
    Conv3d,
    ConvTranspose1d,
    ConvTranspose3d,
    Dense,
    Module,
    PReLU,
    Tensor,
    backward,
    gaussian_kl,
    mse_loss,
    no_grad,
)

PATCH_DEPTH = 5
LATENT = 16
SEQ_CODES = 64
SEQ_LENGTH = MAX_LENGTH
ARTERY_FEATURES = LATENT * SEQ_CODES
KL_WEIGHT = 0.1
LOGVAR_CLAMP = 10.0

HU_CENTER, HU_SCALE = 200.0, 200.0


def normalize_hu(x: np.ndarray) -> np.ndarray:
    return (x - HU_CENTER) / HU_SCALE


def extract_subvolumes(mpr: MprVolume | np.ndarray) -> np.ndarray:
    """One 5x40x40 patch per centerline point, centered on it, zero-padded at both ends.

    Returns a read-only ``(L, 5, 40, 40)`` view.
    """
    vol = mpr.data if isinstance(mpr, MprVolume) else np.asarray(mpr)
    L, h, w = vol.shape
    if h < CROSS_SECTION or w < CROSS_SECTION:
        raise ValueError(f"cross-section {h}x{w} smaller than {CROSS_SECTION}x{CROSS_SECTION}")
    y0, x0 = (h - CROSS_SECTION) // 2, (w - CROSS_SECTION) // 2
    vol = vol[:, y0 : y0 + CROSS_SECTION, x0 : x0 + CROSS_SECTION]
    half = PATCH_DEPTH // 2
    padded = np.pad(vol, [(half, half), (0, 0), (0, 0)])
    win = sliding_window_view(padded, PATCH_DEPTH, axis=0)  # (L, 40, 40, 5)
    return win.transpose(0, 3, 1, 2)


class ArteryVCAE(Module):
    """3-D variational conv autoencoder on 5x40x40 patches.

    The first stage spans all 5 slices, so later stages are in-plane only.
    """

    def __init__(self, rng: np.random.Generator, dtype=np.float32, latent: int = LATENT):
        self.latent = latent
        self.enc = [
            Conv3d(1, 16, (5, 3, 3), rng, stride=(1, 2, 2), pad=(0, 1, 1), dtype=dtype),
            Conv3d(16, 32, (1, 3, 3), rng, stride=(1, 2, 2), pad=(0, 1, 1), dtype=dtype),
            Conv3d(32, 32, (1, 3, 3), rng, stride=(1, 2, 2), pad=(0, 1, 1), dtype=dtype),
        ]
        self.enc_act = [PReLU(c, axis=1, dtype=dtype) for c in (16, 32, 32)]
        self.to_latent = Dense(32 * 5 * 5, 2 * latent, rng, dtype=dtype)
        self.from_latent = Dense(latent, 32 * 5 * 5, rng, dtype=dtype)
        self.from_act = PReLU(32 * 5 * 5, dtype=dtype)
        self.dec = [
            ConvTranspose3d(32, 32, (1, 3, 3), rng, stride=(1, 2, 2), pad=(0, 1, 1), output_padding=(0, 1, 1), dtype=dtype),
            ConvTranspose3d(32, 16, (1, 3, 3), rng, stride=(1, 2, 2), pad=(0, 1, 1), output_padding=(0, 1, 1), dtype=dtype),
            ConvTranspose3d(16, 1, (5, 3, 3), rng, stride=(1, 2, 2), pad=(0, 1, 1), output_padding=(0, 1, 1), dtype=dtype),
        ]
        self.dec_act = [PReLU(c, axis=1, dtype=dtype) for c in (32, 16)]
        self.dtype = dtype

    def encode(self, patches) -> tuple[Tensor, Tensor]:
        """``(B, 5, 40, 40)`` normalized patches -> ``(mu, logvar)``, each ``(B, 16)``."""
        x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=self.dtype))
        h = x.reshape(x.shape[0], 1, *x.shape[1:])
        for conv, act in zip(self.enc, self.enc_act):
            h = act(conv(h))
        out = self.to_latent(h.reshape(h.shape[0], -1))
        mu = out[:, : self.latent]
        logvar = out[:, self.latent :].clip(-LOGVAR_CLAMP, LOGVAR_CLAMP)
        return mu, logvar

    def decode(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=self.dtype))
        h = self.from_act(self.from_latent(z)).reshape(z.shape[0], 32, 1, 5, 5)
        h = self.dec_act[0](self.dec[0](h))
        h = self.dec_act[1](self.dec[1](h))
        h = self.dec[2](h)
        return h.reshape(h.shape[0], PATCH_DEPTH, CROSS_SECTION, CROSS_SECTION)

    def loss(self, patches: np.ndarray, rng: np.random.Generator, beta: float = KL_WEIGHT) -> tuple[Tensor, float, float]:
        """Reconstruction MSE + beta * KL (KL normalized per voxel, like the MSE)."""
        mu, logvar = self.encode(patches)
        eps = rng.standard_normal(mu.shape).astype(self.dtype)
        z = mu + (logvar * 0.5).exp() * eps
        recon = mse_loss(self.decode(z), patches)
        kl = gaussian_kl(mu, logvar)
        n_vox = float(np.prod(patches.shape[1:]))
        total = recon + kl * (beta / n_vox)
        return total, recon.item(), kl.item()


def vcae_encode(model: ArteryVCAE, patches: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Deterministic latent means for raw-HU patches ``(B, 5, 40, 40)``."""
    out = []
    with no_grad():
        for i in range(0, len(patches), chunk):
            batch = normalize_hu(np.asarray(patches[i : i + chunk], dtype=model.dtype))
            out.append(model.encode(batch)[0].data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.latent), model.dtype)


def vcae_decode(model: ArteryVCAE, latents: np.ndarray) -> np.ndarray:
    """Latents -> raw-HU patches."""
    with no_grad():
        rec = model.decode(np.asarray(latents, dtype=model.dtype)).data
    return rec * HU_SCALE + HU_CENTER


def feature_map(model: ArteryVCAE, mpr: MprVolume | np.ndarray) -> np.ndarray:
    """``16 x L`` map of latent means along the centerline."""
    return vcae_encode(model, extract_subvolumes(mpr)).T


class SequenceCAE(Module):
    """1-D conv autoencoder mapping a length-800 latent trace to 64 codes."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32, codes: int = SEQ_CODES):
        chans = (1, 8, 16, 16, 16)
        self.enc = [Conv1d(chans[i], chans[i + 1], 4, rng, stride=2, pad=1, dtype=dtype) for i in range(4)]
        self.enc_act = [PReLU(c, axis=1, dtype=dtype) for c in chans[1:]]
        self.to_code = Dense(16 * 50, codes, rng, dtype=dtype)
        self.from_code = Dense(codes, 16 * 50, rng, dtype=dtype)
        self.from_act = PReLU(16 * 50, dtype=dtype)
        self.dec = [
            ConvTranspose1d(chans[i + 1], chans[i], 4, rng, stride=2, pad=1, dtype=dtype) for i in reversed(range(4))
        ]
        self.dec_act = [PReLU(c, axis=1, dtype=dtype) for c in (16, 16, 8)]
        self.dtype = dtype
        self.codes = codes

    def encode(self, seqs) -> Tensor:
        x = seqs if isinstance(seqs, Tensor) else Tensor(np.asarray(seqs, dtype=self.dtype))
        h = x.reshape(x.shape[0], 1, x.shape[1])
        for conv, act in zip(self.enc, self.enc_act):
            h = act(conv(h))
        return self.to_code(h.reshape(h.shape[0], -1))

    def decode(self, codes) -> Tensor:
        c = codes if isinstance(codes, Tensor) else Tensor(np.asarray(codes, dtype=self.dtype))
        h = self.from_act(self.from_code(c)).reshape(c.shape[0], 16, 50)
        for i, conv in enumerate(self.dec):
            h = conv(h)
            if i < len(self.dec_act):
                h = self.dec_act[i](h)
        return h.reshape(h.shape[0], SEQ_LENGTH)

    def loss(self, seqs: np.ndarray) -> Tensor:
        return mse_loss(self.decode(self.encode(seqs)), seqs)


def pad_sequences(fm: np.ndarray) -> np.ndarray:
    """Zero-pad each row of a ``16 x L`` map at the distal end to length 800."""
    fm = np.asarray(fm)
    if fm.ndim != 2:
        raise ValueError(f"feature map must be 2-D, got {fm.shape}")
    if fm.shape[1] > SEQ_LENGTH:
        raise ValueError(f"artery length {fm.shape[1]} exceeds the maximum sequence length {SEQ_LENGTH}")
    return np.pad(fm, [(0, 0), (0, SEQ_LENGTH - fm.shape[1])])


def sequence_encode(model: SequenceCAE, fm: np.ndarray) -> np.ndarray:
    """``16 x L`` feature map -> 1024 values, row 0's 64 codes first."""
    fm = np.asarray(fm)
    if fm.shape[0] != LATENT:
        raise ValueError(f"feature map must have {LATENT} rows, got {fm.shape[0]}")
    seqs = pad_sequences(fm).astype(model.dtype)
    with no_grad():
        codes = model.encode(seqs).data
    return codes.reshape(-1)


@dataclass
class ArteryEncoder:
    vcae: ArteryVCAE
    seq: SequenceCAE

    @classmethod
    def create(cls, seed: int = 0, dtype=np.float32) -> ArteryEncoder:
        rng = np.random.default_rng(seed)
        return cls(ArteryVCAE(rng, dtype), SequenceCAE(rng, dtype))

    def encode(self, mpr: MprVolume | np.ndarray) -> np.ndarray:
        return sequence_encode(self.seq, feature_map(self.vcae, mpr))

    def encode_many(self, arteries) -> np.ndarray:
        """``N x 1024`` encodings; sequences of all arteries go through the 1-D CAE in one batch."""
        fms = [feature_map(self.vcae, a) for a in arteries]
        seqs = np.concatenate([pad_sequences(fm) for fm in fms], axis=0).astype(self.seq.dtype)
        with no_grad():
            codes = self.seq.encode(seqs).data
        return codes.reshape(len(fms), ARTERY_FEATURES)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"vcae.{k}": v for k, v in self.vcae.state_dict().items()}
        state.update({f"seq.{k}": v for k, v in self.seq.state_dict().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.vcae.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("vcae.")})
        self.seq.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("seq.")})


@dataclass
class PretrainConfig:
    vcae_iterations: int = 1500
    seq_iterations: int = 1500
    batch_size: int = 32
    learning_rate: float = 1e-3
    patches: int = 10_000
    seed: int = 0


@dataclass
class PretrainLog:
    vcae_loss: list[float] = field(default_factory=list)
    vcae_kl: list[float] = field(default_factory=list)
    seq_loss: list[float] = field(default_factory=list)


def sample_patch_corpus(arteries, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` random raw-HU patches drawn uniformly over all centerline points."""
    lengths = np.array([a.length if isinstance(a, MprVolume) else len(a) for a in arteries])
    flat = rng.choice(lengths.sum(), size=count, replace=count > lengths.sum())
    owner = np.searchsorted(np.cumsum(lengths), flat, side="right")
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    out = np.empty((count, PATCH_DEPTH, CROSS_SECTION, CROSS_SECTION), dtype=np.float32)
    views = {}
    for j, (a, pos) in enumerate(zip(owner, flat - starts[owner])):
        if a not in views:
            views[a] = extract_subvolumes(arteries[a])
        out[j] = views[a][pos]
    return out


def train_vcae(model: ArteryVCAE, patches: np.ndarray, iterations: int, batch_size: int, lr: float, seed: int, log: PretrainLog | None = None) -> PretrainLog:
    log = log or PretrainLog()
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=lr)
    model.train()
    data = normalize_hu(patches.astype(model.dtype))
    for _ in range(iterations):
        idx = rng.integers(0, len(data), batch_size)
        opt.zero_grad()
        loss, _, kl = model.loss(data[idx], rng)
        backward(loss)
        opt.step()
        log.vcae_loss.append(loss.item())
        log.vcae_kl.append(kl)
    model.eval()
    return log


def train_sequence_cae(model: SequenceCAE, seqs: np.ndarray, iterations: int, batch_size: int, lr: float, seed: int, log: PretrainLog | None = None) -> PretrainLog:
    log = log or PretrainLog()
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=lr)
    model.train()
    seqs = seqs.astype(model.dtype)
    for _ in range(iterations):
        idx = rng.integers(0, len(seqs), batch_size)
        opt.zero_grad()
        loss = model.loss(seqs[idx])
        backward(loss)
        opt.step()
        log.seq_loss.append(loss.item())
    model.eval()
    return log


def pretrain_artery_caes(arteries, cfg: PretrainConfig = PretrainConfig(), dtype=np.float32) -> tuple[ArteryEncoder, PretrainLog]:
    """Train the patch VCAE on a random patch corpus, then the sequence CAE on the resulting latent traces.

    ``arteries`` must come from patients disjoint from the classification cohort.
    """
    rng = np.random.default_rng(cfg.seed)
    enc = ArteryEncoder.create(int(rng.integers(2**63)), dtype)
    patches = sample_patch_corpus(arteries, cfg.patches, rng)
    log = train_vcae(enc.vcae, patches, cfg.vcae_iterations, cfg.batch_size, cfg.learning_rate, int(rng.integers(2**63)))
    seqs = np.concatenate([pad_sequences(feature_map(enc.vcae, a)) for a in arteries], axis=0)
    train_sequence_cae(enc.seq, seqs, cfg.seq_iterations, cfg.batch_size, cfg.learning_rate, int(rng.integers(2**63)), log)
    return enc, log
