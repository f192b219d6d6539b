"""The three networks: linear inception encoder, nonlinear projector, classifier.

The encoder is strictly linear (no bias, no normalization): per branch, a
bank of depthwise temporal filters followed by a learned per-map channel
collapse, with branch outputs concatenated along the feature axis. The
projector pools in time and applies a second inception block with batch
normalization, ELU and dropout, then flattens to the embedding the
contrastive loss compares. The classifier reads the frozen encoder's
output through two multichannel conv layers into a single logit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.ops import RunningMoments
from .autodiff.tensor import Tensor
from .errors import FormatError, ShapeError

ERPW_MAGIC = b"ERPW"
ERPW_VERSION = 1


@dataclass
class EncoderConfig:
    n_channels: int = 8
    n_samples: int = 128
    sample_rate: float = 128.0
    n_branches: int = 3
    kernel_lengths: tuple = (64, 32, 16)
    kernels_per_branch: int = 8

    def __post_init__(self):
        self.kernel_lengths = tuple(int(p) for p in self.kernel_lengths)
        if len(self.kernel_lengths) != self.n_branches:
            raise ValueError(
                f"{self.n_branches} branches need {self.n_branches} kernel lengths, "
                f"got {self.kernel_lengths}"
            )
        if min(self.n_channels, self.n_samples, self.kernels_per_branch) < 1:
            raise ValueError("channel, sample and kernel counts must be positive")
        if any(p < 1 for p in self.kernel_lengths):
            raise ValueError(f"kernel lengths must be >= 1, got {self.kernel_lengths}")

    @property
    def n_feature_maps(self):
        """Feature maps the encoder emits: branches times kernels per branch."""
        return self.n_branches * self.kernels_per_branch


@dataclass
class BranchParams:
    """One inception branch: temporal filter bank plus per-map channel weights."""

    temporal: Tensor  # (K, P)
    spatial: Tensor  # (K, C_in)


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    moments: RunningMoments


@dataclass
class ProjectorParams:
    pool: int
    dropout: float
    branches: list
    norms: list


@dataclass
class ClassifierParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    dense_w: Tensor
    dense_b: Tensor
    pool: int


@dataclass
class ModelParams:
    config: EncoderConfig
    encoder: list
    projector: ProjectorParams
    classifier: ClassifierParams

    def named_parameters(self, parts=("encoder", "projector", "classifier")):
        out = []
        if "encoder" in parts:
            for i, br in enumerate(self.encoder):
                out.append((f"encoder.branch{i}.temporal", br.temporal))
                out.append((f"encoder.branch{i}.spatial", br.spatial))
        if "projector" in parts:
            for i, br in enumerate(self.projector.branches):
                out.append((f"projector.branch{i}.temporal", br.temporal))
                out.append((f"projector.branch{i}.spatial", br.spatial))
            for i, bn in enumerate(self.projector.norms):
                out.append((f"projector.branch{i}.bn.gamma", bn.gamma))
                out.append((f"projector.branch{i}.bn.beta", bn.beta))
        if "classifier" in parts:
            c = self.classifier
            out.extend(
                [
                    ("classifier.conv1.weight", c.conv1_w),
                    ("classifier.conv1.bias", c.conv1_b),
                    ("classifier.conv2.weight", c.conv2_w),
                    ("classifier.conv2.bias", c.conv2_b),
                    ("classifier.dense.weight", c.dense_w),
                    ("classifier.dense.bias", c.dense_b),
                ]
            )
        return out

    def set_requires_grad(self, parts, flag):
        for _, p in self.named_parameters(parts):
            p.requires_grad = flag

    def state_arrays(self):
        """All persistent arrays by name: weights plus batch-norm moments."""
        out = {name: t.data for name, t in self.named_parameters()}
        for i, bn in enumerate(self.projector.norms):
            out[f"projector.branch{i}.bn.running_mean"] = bn.moments.mean
            out[f"projector.branch{i}.bn.running_var"] = bn.moments.var
        return out

    def load_state_arrays(self, arrays):
        for name, t in self.named_parameters():
            value = arrays[name]
            if value.shape != t.data.shape:
                raise ShapeError(
                    f"checkpoint entry {name} has shape {value.shape}, expected {t.data.shape}"
                )
            t.data = np.ascontiguousarray(value.astype(t.dtype))
        for i, bn in enumerate(self.projector.norms):
            bn.moments.mean = arrays[f"projector.branch{i}.bn.running_mean"].astype(
                bn.moments.mean.dtype
            )
            bn.moments.var = arrays[f"projector.branch{i}.bn.running_var"].astype(
                bn.moments.var.dtype
            )

    def snapshot(self):
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def restore(self, snapshot):
        self.load_state_arrays(snapshot)

    def n_parameters(self):
        total = 0
        for _, t in self.named_parameters():
            total += t.size
        return total


def projector_kernel_lengths(config, pool):
    """Branch kernel lengths after pooling, preserving receptive field in seconds."""
    return tuple(max(1, p // pool) for p in config.kernel_lengths)


def projector_dim(config, pool=4):
    return config.n_feature_maps * (config.n_samples // pool)


def expected_parameter_count(
    config, pool=4, clf_filters=(16, 8), clf_kernels=(16, 8), clf_pool=2
):
    """Closed-form parameter count; a pure function of the configuration."""
    k1, m = config.kernels_per_branch, config.n_channels
    maps = config.n_feature_maps
    enc = _sum(k1 * p for p in config.kernel_lengths) + config.n_branches * k1 * m
    proj = (
        _sum(k1 * p for p in projector_kernel_lengths(config, pool))
        + config.n_branches * k1 * maps
        + config.n_branches * 2 * k1
    )
    f1, f2 = clf_filters
    p1, p2 = clf_kernels
    t_out = (config.n_samples // clf_pool) // clf_pool
    clf = (f1 * maps * p1 + f1) + (f2 * f1 * p2 + f2) + (f2 * t_out + 1)
    return enc + proj + clf


def _sum(it):
    total = 0
    for v in it:
        total += v
    return total


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


def init_params(
    config,
    seed,
    pool=4,
    dropout=0.25,
    clf_filters=(16, 8),
    clf_kernels=(16, 8),
    clf_pool=2,
    dtype=np.float32,
):
    """Deterministic fan-in scaled initialization of all three networks."""
    f1, f2 = clf_filters
    if f1 <= f2:
        raise ValueError(f"classifier filter counts must decrease, got {clf_filters}")
    rng = np.random.default_rng(seed)
    k1, m = config.kernels_per_branch, config.n_channels
    maps = config.n_feature_maps

    encoder = [
        BranchParams(
            temporal=_uniform(rng, (k1, p), p, dtype),
            spatial=_uniform(rng, (k1, m), m, dtype),
        )
        for p in config.kernel_lengths
    ]

    proj_branches, proj_norms = [], []
    for p in projector_kernel_lengths(config, pool):
        proj_branches.append(
            BranchParams(
                temporal=_uniform(rng, (k1, p), p, dtype),
                spatial=_uniform(rng, (k1, maps), maps, dtype),
            )
        )
        proj_norms.append(
            BatchNormParams(
                gamma=Tensor(np.ones(k1, dtype=dtype)),
                beta=Tensor(np.zeros(k1, dtype=dtype)),
                moments=RunningMoments.create(k1, dtype=dtype),
            )
        )

    p1, p2 = clf_kernels
    t_out = (config.n_samples // clf_pool) // clf_pool
    classifier = ClassifierParams(
        conv1_w=_uniform(rng, (f1, maps, p1), maps * p1, dtype),
        conv1_b=Tensor(np.zeros(f1, dtype=dtype)),
        conv2_w=_uniform(rng, (f2, f1, p2), f1 * p2, dtype),
        conv2_b=Tensor(np.zeros(f2, dtype=dtype)),
        dense_w=_uniform(rng, (f2 * t_out, 1), f2 * t_out, dtype),
        dense_b=Tensor(np.zeros(1, dtype=dtype)),
        pool=clf_pool,
    )

    return ModelParams(
        config=config,
        encoder=encoder,
        projector=ProjectorParams(pool=pool, dropout=dropout, branches=proj_branches, norms=proj_norms),
        classifier=classifier,
    )


def _check_input(x, config):
    if x.ndim not in (2, 3):
        raise ShapeError(f"expected (M, N) or (batch, M, N), got {x.shape}")
    if x.shape[-2] != config.n_channels or x.shape[-1] != config.n_samples:
        raise ShapeError(
            f"input {x.shape[-2]}x{x.shape[-1]} does not match config "
            f"{config.n_channels}x{config.n_samples}"
        )


def encoder_forward(x, params):
    """(.., M, N) -> (.., B*K1, N); purely linear."""
    config = params.config
    _check_input(x, config)
    k1 = config.kernels_per_branch
    m = config.n_channels
    outs = []
    for br in params.encoder:
        maps = ops.conv1d_same(x, br.temporal)  # (.., K1*M, N)
        maps = ops.reshape(maps, x.shape[:-2] + (k1, m, config.n_samples))
        outs.append(ops.spatial_collapse(maps, br.spatial))  # (.., K1, N)
    return ops.concat(outs, axis=-2)


def _norm_per_map(x, bn, mode, update_running):
    """Batch-normalize (.., K, T) per map across every row and time step."""
    batched = x.ndim == 3
    k = x.shape[-2]
    if batched:
        rows = ops.reshape(ops.transpose(x, (0, 2, 1)), (-1, k))
    else:
        rows = ops.transpose(x, (1, 0))
    rows = ops.batch_norm(rows, bn.gamma, bn.beta, mode, bn.moments, update_running)
    if batched:
        return ops.transpose(ops.reshape(rows, (x.shape[0], x.shape[2], k)), (0, 2, 1))
    return ops.transpose(rows, (1, 0))


def projector_forward(h, params, mode="train", rng=None, frozen_stats=False):
    """(.., B*K1, N) -> flat embedding of length B*K1*(N // pool).

    Train mode uses batch statistics for normalization and applies
    dropout (an rng is then required unless the rate is zero);
    frozen_stats forces the running moments without updating them.
    """
    config = params.config
    proj = params.projector
    maps = config.n_feature_maps
    if h.ndim not in (2, 3) or h.shape[-2] != maps:
        raise ShapeError(f"projector expects (.., {maps}, N), got {h.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    pooled = ops.avg_pool_time(h, proj.pool)
    t_out = pooled.shape[-1]
    k1 = config.kernels_per_branch
    bn_mode = "train" if (mode == "train" and not frozen_stats) else "eval"
    update = mode == "train" and not frozen_stats

    outs = []
    for br, bn in zip(proj.branches, proj.norms):
        z = ops.conv1d_same(pooled, br.temporal)  # (.., K1*maps, T)
        z = ops.reshape(z, h.shape[:-2] + (k1, maps, t_out))
        z = ops.spatial_collapse(z, br.spatial)  # (.., K1, T)
        z = _norm_per_map(z, bn, bn_mode, update)
        z = ops.elu(z)
        z = ops.dropout(z, proj.dropout, mode, rng)
        outs.append(z)
    merged = ops.concat(outs, axis=-2)  # (.., B*K1, T)
    flat_dim = maps * t_out
    if h.ndim == 3:
        return ops.reshape(merged, (h.shape[0], flat_dim))
    return ops.reshape(merged, (flat_dim,))


def classifier_forward(h, params, mode="eval"):
    """(.., B*K1, N) -> logit; () for a single input, (batch,) for a batch."""
    config = params.config
    clf = params.classifier
    maps = config.n_feature_maps
    if h.ndim not in (2, 3) or h.shape[-2] != maps:
        raise ShapeError(f"classifier expects (.., {maps}, N), got {h.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    z = ops.conv1d_channels(h, clf.conv1_w, clf.conv1_b)
    z = ops.avg_pool_time(ops.elu(z), clf.pool)
    z = ops.conv1d_channels(z, clf.conv2_w, clf.conv2_b)
    z = ops.avg_pool_time(ops.elu(z), clf.pool)
    flat_dim = z.shape[-2] * z.shape[-1]
    if h.ndim == 3:
        z = ops.reshape(z, (h.shape[0], flat_dim))
        logits = ops.dense(z, clf.dense_w, clf.dense_b)
        return ops.reshape(logits, (h.shape[0],))
    z = ops.reshape(z, (flat_dim,))
    logits = ops.dense(z, clf.dense_w, clf.dense_b)
    return ops.reshape(logits, ())


# ---------------------------------------------------------------------------
# ERPW checkpoint container


def _meta_entries(params):
    config = params.config
    return {
        "meta/encoder": np.asarray(
            [
                config.n_channels,
                config.n_samples,
                config.sample_rate,
                config.n_branches,
                config.kernels_per_branch,
                *config.kernel_lengths,
            ],
            dtype=np.float32,
        ),
        "meta/projector": np.asarray(
            [params.projector.pool, params.projector.dropout], dtype=np.float32
        ),
        "meta/classifier": np.asarray(
            [
                params.classifier.conv1_w.shape[0],
                params.classifier.conv2_w.shape[0],
                params.classifier.conv1_w.shape[2],
                params.classifier.conv2_w.shape[2],
                params.classifier.pool,
            ],
            dtype=np.float32,
        ),
    }


def save_checkpoint(params, path):
    """Write all model arrays as ERPW: magic, version, then named f32 entries."""
    entries = {**_meta_entries(params), **params.state_arrays()}
    with open(path, "wb") as f:
        f.write(ERPW_MAGIC)
        f.write(struct.pack("<I", ERPW_VERSION))
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            blob = name.encode("utf-8")
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f, n, offset, what):
    data = f.read(n)
    if len(data) != n:
        raise FormatError(
            f"truncated checkpoint: expected {n} bytes for {what}, got {len(data)}",
            offset=offset,
        )
    return data


def read_erpw_entries(path):
    """Raw name -> array mapping from an ERPW file, with positional errors."""
    entries = {}
    with open(path, "rb") as f:
        offset = 0
        magic = _read_exact(f, 4, offset, "magic")
        if magic != ERPW_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {ERPW_MAGIC!r}", offset=0)
        offset += 4
        version = struct.unpack("<I", _read_exact(f, 4, offset, "version"))[0]
        if version != ERPW_VERSION:
            raise FormatError(f"unsupported version {version}", offset=offset)
        offset += 4
        count = struct.unpack("<I", _read_exact(f, 4, offset, "entry count"))[0]
        offset += 4
        for _ in range(count):
            name_len = struct.unpack("<I", _read_exact(f, 4, offset, "name length"))[0]
            offset += 4
            name = _read_exact(f, name_len, offset, "name").decode("utf-8")
            offset += name_len
            ndim = struct.unpack("<I", _read_exact(f, 4, offset, "rank"))[0]
            offset += 4
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, offset, "shape"))
            offset += 4 * ndim
            n_values = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            raw = _read_exact(f, 4 * n_values, offset, f"values of {name}")
            offset += 4 * n_values
            entries[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        trailing = f.read(1)
        if trailing:
            raise FormatError("trailing bytes after final entry", offset=offset)
    return entries


def load_checkpoint(path, config=None):
    """Rebuild ModelParams from an ERPW file, validating shapes against config."""
    entries = read_erpw_entries(path)
    for key in ("meta/encoder", "meta/projector", "meta/classifier"):
        if key not in entries:
            raise FormatError(f"checkpoint is missing the {key} entry")
    enc_meta = entries["meta/encoder"]
    n_branches = int(enc_meta[3])
    file_config = EncoderConfig(
        n_channels=int(enc_meta[0]),
        n_samples=int(enc_meta[1]),
        sample_rate=float(enc_meta[2]),
        n_branches=n_branches,
        kernel_lengths=tuple(int(p) for p in enc_meta[5 : 5 + n_branches]),
        kernels_per_branch=int(enc_meta[4]),
    )
    if config is not None and config != file_config:
        raise FormatError(f"checkpoint config {file_config} does not match {config}")
    proj_meta = entries["meta/projector"]
    clf_meta = entries["meta/classifier"]
    params = init_params(
        file_config,
        seed=0,
        pool=int(proj_meta[0]),
        dropout=float(proj_meta[1]),
        clf_filters=(int(clf_meta[0]), int(clf_meta[1])),
        clf_kernels=(int(clf_meta[2]), int(clf_meta[3])),
        clf_pool=int(clf_meta[4]),
    )
    missing = [k for k in params.state_arrays() if k not in entries]
    if missing:
        raise FormatError(f"checkpoint is missing entries: {missing}")
    params.load_state_arrays(entries)
    return params
