"""LV myocardium encoding: patch CAE latents pooled over 500 connected clusters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.cluster import KMeans

from .synthgen import MYO_SPACING
from .tensor import (
    Adam,
    Conv3d,
    ConvTranspose3d,
    Dense,
    Module,
    PReLU,
    Tensor,
    backward,
    mse_loss,
    no_grad,
)

N_CLUSTERS = 500
PATCH = 16
LATENT = 128
N_STATS = 4
MYO_FEATURES = N_STATS * LATENT
MAX_PATCHES_PER_CLUSTER = 32

HU_CENTER, HU_SCALE = 150.0, 150.0

_CONN26 = np.ones((3, 3, 3), dtype=bool)


class MyoCAE(Module):
    """Conv autoencoder for 16x16 in-plane patches with a 128-value code."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32, latent: int = LATENT):
        self.enc1 = Conv3d(1, 16, (1, 3, 3), rng, stride=(1, 2, 2), pad=(0, 1, 1), dtype=dtype)
        self.enc2 = Conv3d(16, 32, (1, 3, 3), rng, stride=(1, 2, 2), pad=(0, 1, 1), dtype=dtype)
        self.act1, self.act2 = PReLU(16, axis=1, dtype=dtype), PReLU(32, axis=1, dtype=dtype)
        self.to_code = Dense(32 * 4 * 4, latent, rng, dtype=dtype)
        self.from_code = Dense(latent, 32 * 4 * 4, rng, dtype=dtype)
        self.act3 = PReLU(32 * 4 * 4, dtype=dtype)
        self.dec1 = ConvTranspose3d(32, 16, (1, 3, 3), rng, stride=(1, 2, 2), pad=(0, 1, 1), output_padding=(0, 1, 1), dtype=dtype)
        self.act4 = PReLU(16, axis=1, dtype=dtype)
        self.dec2 = ConvTranspose3d(16, 1, (1, 3, 3), rng, stride=(1, 2, 2), pad=(0, 1, 1), output_padding=(0, 1, 1), dtype=dtype)
        self.dtype = dtype
        self.latent = latent

    def encode(self, patches) -> Tensor:
        x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=self.dtype))
        h = x.reshape(x.shape[0], 1, 1, PATCH, PATCH)
        h = self.act2(self.enc2(self.act1(self.enc1(h))))
        return self.to_code(h.reshape(h.shape[0], -1))

    def decode(self, codes) -> Tensor:
        c = codes if isinstance(codes, Tensor) else Tensor(np.asarray(codes, dtype=self.dtype))
        h = self.act3(self.from_code(c)).reshape(c.shape[0], 32, 1, 4, 4)
        h = self.dec2(self.act4(self.dec1(h)))
        return h.reshape(h.shape[0], PATCH, PATCH)

    def loss(self, patches: np.ndarray) -> Tensor:
        return mse_loss(self.decode(self.encode(patches)), patches)


def normalize_hu(x: np.ndarray) -> np.ndarray:
    return (x - HU_CENTER) / HU_SCALE


def myo_cae_encode(model: MyoCAE, patches: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Raw-HU ``(B, 16, 16)`` patches -> ``(B, 128)`` codes."""
    out = []
    with no_grad():
        for i in range(0, len(patches), chunk):
            out.append(model.encode(normalize_hu(np.asarray(patches[i : i + chunk], dtype=model.dtype))).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.latent), model.dtype)


def myo_cae_decode(model: MyoCAE, codes: np.ndarray) -> np.ndarray:
    with no_grad():
        rec = model.decode(np.asarray(codes, dtype=model.dtype)).data
    return rec * HU_SCALE + HU_CENTER


def extract_patches(volume: np.ndarray, voxels: np.ndarray) -> np.ndarray:
    """In-plane 16x16 patches centered on ``(z, y, x)`` voxels; zero outside the volume."""
    half = PATCH // 2
    padded = np.pad(volume, [(0, 0), (half, half), (half, half)])
    voxels = np.asarray(voxels, dtype=int).reshape(-1, 3)
    zs, ys, xs = voxels[:, 0], voxels[:, 1], voxels[:, 2]
    oy, ox = np.mgrid[0:PATCH, 0:PATCH]
    return padded[zs[:, None, None], ys[:, None, None] + oy, xs[:, None, None] + ox]


@dataclass
class MyoClusterSet:
    """Partition of the mask voxels into spatially connected clusters."""

    voxels: np.ndarray  # (n, 3) voxel indices
    labels: np.ndarray  # (n,) cluster id per voxel
    spacing: tuple[float, float, float]

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1

    def members(self, c: int) -> np.ndarray:
        return self.voxels[self.labels == c]

    def clusters(self) -> list[np.ndarray]:
        order = np.argsort(self.labels, kind="stable")
        bounds = np.searchsorted(self.labels[order], np.arange(self.n_clusters + 1))
        return [self.voxels[order[bounds[i] : bounds[i + 1]]] for i in range(self.n_clusters)]

    def centroids(self) -> np.ndarray:
        """Cluster centroids in mm."""
        sums = np.zeros((self.n_clusters, 3))
        np.add.at(sums, self.labels, self.voxels * np.asarray(self.spacing))
        return sums / np.bincount(self.labels, minlength=self.n_clusters)[:, None]


def is_connected(voxels: np.ndarray) -> bool:
    """26-connectivity flood-fill check for a voxel index set."""
    voxels = np.asarray(voxels)
    if len(voxels) == 0:
        return False
    lo = voxels.min(axis=0)
    box = np.zeros(tuple(voxels.max(axis=0) - lo + 1), dtype=bool)
    box[tuple((voxels - lo).T)] = True
    _, n = ndimage.label(box, structure=_CONN26)
    return n == 1


def _allocate(sizes: np.ndarray, k: int) -> np.ndarray:
    """Split ``k`` clusters over components proportionally (largest remainder), at least one each."""
    quota = sizes / sizes.sum() * k
    alloc = np.maximum(1, np.floor(quota).astype(int))
    alloc = np.minimum(alloc, sizes)
    while alloc.sum() < k:
        room = alloc < sizes
        deficit = np.where(room, quota - alloc, -np.inf)
        alloc[int(np.argmax(deficit))] += 1
    while alloc.sum() > k:
        surplus = np.where(alloc > 1, alloc - quota, -np.inf)
        alloc[int(np.argmax(surplus))] -= 1
    return alloc


def _repair(lab: np.ndarray, centroids: np.ndarray, spacing: np.ndarray, max_rounds: int = 50) -> None:
    """Reassign disconnected cluster fragments to the nearest adjacent cluster, in place."""
    for _ in range(max_rounds):
        changed = False
        for c, sl in enumerate(ndimage.find_objects(lab + 1)):
            if sl is None:
                continue
            grown = tuple(slice(max(s.start - 1, 0), s.stop + 1) for s in sl)
            sub = lab[grown]
            comp, n = ndimage.label(sub == c, structure=_CONN26)
            if n <= 1:
                continue
            sizes = np.bincount(comp.ravel())[1:]
            keep = int(np.argmax(sizes)) + 1
            for f in range(1, n + 1):
                if f == keep:
                    continue
                frag = comp == f
                ring = ndimage.binary_dilation(frag, structure=_CONN26) & ~frag
                neigh = np.unique(sub[ring])
                neigh = neigh[(neigh >= 0) & (neigh != c)]
                if len(neigh) == 0:
                    continue
                frag_center = (np.argwhere(frag) + [s.start for s in grown]).mean(axis=0) * spacing
                best = neigh[np.argmin(np.linalg.norm(centroids[neigh] - frag_center, axis=1))]
                sub[frag] = best
                changed = True
        if not changed:
            return


def cluster_myocardium(mask: np.ndarray, seed: int = 0, k: int = N_CLUSTERS, spacing=MYO_SPACING) -> MyoClusterSet:
    """k-means on voxel coordinates (mm) within each connected mask component, then connectivity repair."""
    mask = np.asarray(mask, dtype=bool)
    n_vox = int(mask.sum())
    if n_vox < k:
        raise ValueError(f"mask has {n_vox} voxels, need at least {k} for {k} clusters")
    spacing = np.asarray(spacing, dtype=float)
    comp, n_comp = ndimage.label(mask, structure=_CONN26)
    if n_comp > k:
        raise ValueError(f"mask has {n_comp} disconnected components, more than {k} clusters")
    sizes = np.bincount(comp.ravel())[1:]
    alloc = _allocate(sizes, k)

    lab = np.full(mask.shape, -1, dtype=np.int64)
    next_id = 0
    for ci in range(n_comp):
        vox = np.argwhere(comp == ci + 1)
        kc = int(alloc[ci])
        if kc == len(vox):
            assign = np.arange(kc)
        elif kc == 1:
            assign = np.zeros(len(vox), dtype=int)
        else:
            km = KMeans(n_clusters=kc, n_init=1, random_state=seed, algorithm="lloyd")
            assign = km.fit_predict(vox * spacing)
        # relabel in order of first appearance so ids do not depend on k-means internals
        _, first = np.unique(assign, return_index=True)
        remap = np.empty(assign.max() + 1, dtype=np.int64)
        remap[assign[np.sort(first)]] = np.arange(len(first))
        lab[tuple(vox.T)] = remap[assign] + next_id
        next_id += len(first)

    vox = np.argwhere(mask)
    cs = MyoClusterSet(vox, lab[tuple(vox.T)], tuple(spacing))
    _repair(lab, cs.centroids(), spacing)
    labels = lab[tuple(vox.T)]
    # compact ids (repair never empties a cluster: the largest fragment is kept)
    _, labels = np.unique(labels, return_inverse=True)
    return MyoClusterSet(vox, labels.astype(np.int64), tuple(float(s) for s in spacing))


def cluster_latents(volume: np.ndarray, clusters: MyoClusterSet, model: MyoCAE, seed: int = 0, max_per_cluster: int = MAX_PATCHES_PER_CLUSTER) -> np.ndarray:
    """Average patch code per cluster, ``(n_clusters, 128)``."""
    rng = np.random.default_rng(seed)
    picks, owners = [], []
    for c, members in enumerate(clusters.clusters()):
        if len(members) > max_per_cluster:
            members = members[np.sort(rng.choice(len(members), max_per_cluster, replace=False))]
        picks.append(members)
        owners.append(np.full(len(members), c))
    picks, owners = np.concatenate(picks), np.concatenate(owners)
    codes = myo_cae_encode(model, extract_patches(volume, picks)).astype(np.float64)
    sums = np.zeros((clusters.n_clusters, codes.shape[1]))
    np.add.at(sums, owners, codes)
    return sums / np.bincount(owners, minlength=clusters.n_clusters)[:, None]


def cluster_statistics(latents: np.ndarray) -> np.ndarray:
    """``[mean | sd | min | max]`` over clusters, per latent dimension.

    Columns are sorted first so the floating-point result does not depend on cluster order.
    """
    latents = np.sort(np.asarray(latents, dtype=np.float64), axis=0)
    return np.concatenate([latents.mean(0), latents.std(0), latents.min(0), latents.max(0)])


def myo_features(volume: np.ndarray, clusters: MyoClusterSet, model: MyoCAE, seed: int = 0) -> np.ndarray:
    return cluster_statistics(cluster_latents(volume, clusters, model, seed))


def sample_myo_patches(volumes, masks, count: int, rng: np.random.Generator) -> np.ndarray:
    per = int(np.ceil(count / len(volumes)))
    out = []
    for vol, mask in zip(volumes, masks):
        vox = np.argwhere(mask)
        out.append(extract_patches(vol, vox[rng.choice(len(vox), per, replace=per > len(vox))]))
    return np.concatenate(out)[:count].astype(np.float32)


def pretrain_myo_cae(volumes, masks, iterations: int = 1500, batch_size: int = 64, lr: float = 1e-3, patches: int = 10_000, seed: int = 0, dtype=np.float32) -> tuple[MyoCAE, list[float]]:
    rng = np.random.default_rng(seed)
    model = MyoCAE(rng, dtype)
    data = normalize_hu(sample_myo_patches(volumes, masks, patches, rng)).astype(dtype)
    opt = Adam(model.parameters(), lr=lr)
    losses = []
    model.train()
    for _ in range(iterations):
        idx = rng.integers(0, len(data), batch_size)
        opt.zero_grad()
        loss = model.loss(data[idx])
        backward(loss)
        opt.step()
        losses.append(loss.item())
    model.eval()
    return model, losses
