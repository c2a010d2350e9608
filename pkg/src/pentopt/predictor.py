"""Multi-level geometry predictor network and its model file format.

Input: concat(Rk, Rs, Mtar) of width 4*(d_inp+1)^2 + 1 (325 for d_inp = 8).
A dense trunk ends at d_inp^2 * channels units and is reshaped to a
d_inp x d_inp x channels feature map; the boundary conditions also enter
spatially through a 1x1 conv on their element-grid maps (optionally joined
by strain-energy maps of the load case on a uniform density field, see
ArchitectureConfig.strain_input). Level 1 applies a stack of convolutions
(ArchitectureConfig.l1_depth) and a 1x1 output head; each higher level
upsamples the previous level's feature map, adds the (upsampled) trunk
features, applies one residual block and its own output head. All
lower-level parameters are shared, not copied, across levels. The sigmoid
output heads keep densities strictly inside (0, 1); at inference the
sigmoid's shift is solved so the mean density matches the fill target
exactly (forward(..., project_fill=True)).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .domain import (BoundaryConditionSet, DensityField, InputSample, Level,
                     X_MIN_DEFAULT)

MODEL_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"


class ModelLoadError(ValueError):
    """Raised when a model file fails validation."""


@dataclass(frozen=True)
class ArchitectureConfig:
    d_inp: int = 8
    levels: int = 4
    trunk_widths: tuple = (512, 1024, 2048, 4096)
    channels: int = 64
    kernel_size: int = 3
    dtype: str = "float32"
    # number of 3x3 convolutions at level 1; deeper stacks widen the
    # receptive field so far-apart elements can react to the load position
    # through the convolutional path, not only the dense trunk
    l1_depth: int = 2
    # static (force) inputs are O(100) N; scale them to O(1) so the first
    # dense layer sees comparably sized features across all input groups
    static_input_scale: float = 0.01
    # when set, the forward pass solves the input's load case once on a
    # uniform density field and injects the per-element strain energy map
    # (linear and log-scaled) as two extra spatial channels. The map encodes
    # the load path from force to support, which generalizes across load
    # positions far faster than the network can learn it from coordinates
    strain_input: bool = False
    # initial value of the learnable per-level gain on the strain skip into
    # the output heads (see Predictor.__init__)
    strain_gain_init: float = 2.0

    def __post_init__(self):
        if self.trunk_widths[-1] != self.d_inp ** 2 * self.channels:
            raise ValueError(
                f"trunk must end at d_inp^2 * channels = "
                f"{self.d_inp ** 2 * self.channels}, got {self.trunk_widths[-1]}"
            )

    @property
    def input_width(self) -> int:
        return 4 * (self.d_inp + 1) ** 2 + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk_widths"] = list(self.trunk_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        d = dict(d)
        d["trunk_widths"] = tuple(d["trunk_widths"])
        return cls(**d)

    def arch_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class Predictor:
    """The trainable network f_p(Wp, Rk, Rs, Mtar) -> X with per-level heads."""

    def __init__(self, arch: ArchitectureConfig = ArchitectureConfig(),
                 seed: int = 0):
        self.arch = arch
        rng = np.random.default_rng(seed)
        dt = arch.dtype
        ch, k = arch.channels, arch.kernel_size

        self.trunk = []
        n_in = arch.input_width
        for li, width in enumerate(arch.trunk_widths):
            dense = ad.Dense(n_in, width, rng, f"trunk{li}", dtype=dt)
            act = ad.PReLU(f"trunk{li}", dtype=dt)
            self.trunk.append((dense, act))
            n_in = width

        # the boundary conditions also enter spatially: the four nodal maps
        # (rkx, rky, rsx, rsy) are averaged onto the element grid and injected
        # into the trunk feature map through a 1x1 convolution, so the
        # convolutional layers see load position and direction directly
        # instead of only through the dense bottleneck
        n_spatial = 4 + (2 if arch.strain_input else 0)
        self.bc_inject = ad.Conv2D(n_spatial, ch, 1, rng, "l1.bc_inject",
                                   dtype=dt)
        self.l1_stack = [
            (ad.Conv2D(ch, ch, k, rng, f"l1.conv{i}", dtype=dt),
             ad.PReLU(f"l1.act{i}", dtype=dt))
            for i in range(arch.l1_depth)
        ]

        self.blocks = [
            ad.ResNetBlock(ch, ch, k, rng, f"l{lam}.block", dtype=dt)
            for lam in range(2, arch.levels + 1)
        ]
        self.heads = [
            ad.Conv2D(ch, 1, 1, rng, f"l{lam}.head", dtype=dt)
            for lam in range(1, arch.levels + 1)
        ]
        # each head's pre-activation is normalized per sample to zero mean and
        # unit RMS, scaled by a learnable gain, and shifted by a learnable
        # multiple of logit(Mtar). The normalization bounds the pre-activation
        # so the sigmoid cannot saturate irrecoverably (an all-solid field is
        # a strong early attractor of the objective), and the zero mean
        # decouples the spatial structure from the fill degree, which the
        # logit shift controls directly.
        self.head_gains = [
            ad.Tensor(np.asarray(1.0, dtype=dt), requires_grad=True,
                      name=f"l{lam}.head_gain")
            for lam in range(1, arch.levels + 1)
        ]
        self.fill_gains = [
            ad.Tensor(np.asarray(1.0, dtype=dt), requires_grad=True,
                      name=f"l{lam}.fill_gain")
            for lam in range(1, arch.levels + 1)
        ]
        # with strain input, the standardized log strain-energy map also
        # enters each head directly with a learnable gain. Projected onto the
        # target fill it is already a strong structure prior (the material
        # belongs where the uniform-density load case stores energy), so the
        # network starts near that prior and learns a correction
        self.strain_gains = [
            ad.Tensor(np.asarray(arch.strain_gain_init, dtype=dt),
                      requires_grad=True, name=f"l{lam}.strain_gain")
            for lam in range(1, arch.levels + 1)
        ] if arch.strain_input else []

    # -- parameter access -----------------------------------------------------

    def parameters(self) -> list[ad.Tensor]:
        params: list[ad.Tensor] = []
        for dense, act in self.trunk:
            params += dense.parameters() + act.parameters()
        params += self.bc_inject.parameters()
        for conv, act in self.l1_stack:
            params += conv.parameters() + act.parameters()
        for block in self.blocks:
            params += block.parameters()
        for head in self.heads:
            params += head.parameters()
        params += self.head_gains + self.fill_gains + self.strain_gains
        return params

    def named_parameters(self) -> dict[str, ad.Tensor]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise RuntimeError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    # -- forward --------------------------------------------------------------

    def _strain_maps(self, raw: np.ndarray) -> np.ndarray:
        """Per-element strain energy of each sample's load case on a uniform
        density field, as (batch, d, d, 2) channels: peak-normalized and
        log-scaled. Constant with respect to the parameters, so no gradient
        flows through it. Unsolvable inputs (e.g. under-constrained random
        vectors in shape tests) yield zero channels.
        """
        from . import fem

        d0 = self.arch.d_inp
        n1sq = (d0 + 1) ** 2
        b = raw.shape[0]
        out = np.zeros((b, d0, d0, 2), dtype=self.arch.dtype)
        for si in range(b):
            blocks = [raw[si, ki * n1sq:(ki + 1) * n1sq]
                      .reshape(d0 + 1, d0 + 1, order="F") for ki in range(4)]
            bcs = BoundaryConditionSet(
                rkx=blocks[0] > 0.5, rky=blocks[1] > 0.5,
                rsx=blocks[2], rsy=blocks[3])
            m = float(np.clip(raw[si, -1], 0.05, 1.0))
            try:
                res = fem.solve_compliance(
                    np.full(d0 * d0, m), bc=bcs)
            except (fem.SolverError, ValueError):
                continue
            # dc/dx_i = -p x_i^(p-1) u_i^T ke u_i with uniform x_i = m
            energy = np.maximum(-res.dc_dx / (3.0 * m * m), 0.0)
            e_map = energy.reshape(d0, d0, order="F")
            out[si, :, :, 0] = e_map / (e_map.max() + 1e-30)
            z = np.log1p(e_map / (e_map.mean() + 1e-30))
            out[si, :, :, 1] = (z - z.mean()) / (z.std() + 1e-30)
        return out

    def forward(self, inputs, level: int, project_fill: bool = False) -> ad.Tensor:
        """Batched forward pass to the given level's head.

        ``inputs``: (batch, input_width) array or tensor. Returns the
        post-sigmoid (batch, d^2) density tensor in column-major layout.

        With ``project_fill`` the sigmoid's shift is solved per sample so the
        mean density equals the target fill exactly. Training leaves it off
        (the fill term of the objective supplies a soft constraint; a hard
        in-training projection collapses the net into a load-independent
        dither pattern), inference turns it on.
        """
        if not 1 <= level <= self.arch.levels:
            raise ValueError(
                f"level {level} outside architecture range 1..{self.arch.levels}"
            )
        x = inputs if isinstance(inputs, ad.Tensor) else ad.Tensor(
            np.asarray(inputs, dtype=self.arch.dtype)
        )
        if x.data.ndim != 2 or x.data.shape[1] != self.arch.input_width:
            raise ValueError(
                f"input has shape {x.data.shape}, expected "
                f"(batch, {self.arch.input_width})"
            )
        if x.data.dtype != np.dtype(self.arch.dtype):
            x = x.astype(self.arch.dtype)
        raw = np.asarray(x.data, dtype=float)
        if self.arch.static_input_scale != 1.0:
            l2 = 2 * (self.arch.d_inp + 1) ** 2
            scale = np.ones(self.arch.input_width, dtype=self.arch.dtype)
            scale[l2:2 * l2] = self.arch.static_input_scale
            x = x * ad.Tensor(scale)
        b = x.data.shape[0]
        d0, ch = self.arch.d_inp, self.arch.channels
        m_tar = np.clip(x.data[:, -1:], 1e-6, 1.0 - 1e-6)

        # element-grid maps of the four nodal condition fields (corner mean);
        # nodal vectors are column-major, so a C-order reshape gives (col, row)
        n1 = d0 + 1
        maps = np.empty((b, d0, d0, 4), dtype=self.arch.dtype)
        for ki in range(4):
            nodal = x.data[:, ki * n1 * n1:(ki + 1) * n1 * n1]
            nodal = nodal.reshape(b, n1, n1).transpose(0, 2, 1)  # (b, row, col)
            maps[..., ki] = 0.25 * (nodal[:, :-1, :-1] + nodal[:, 1:, :-1]
                                    + nodal[:, :-1, 1:] + nodal[:, 1:, 1:])
        strain_z = None
        if self.arch.strain_input:
            strain = self._strain_maps(raw)
            strain_z = strain[..., 1]
            maps = np.concatenate([maps, strain], axis=-1)
        bc_maps = ad.Tensor(maps)

        for dense, act in self.trunk:
            x = act(dense(x))
        trunk_feat = x.reshape(b, d0, d0, ch) + self.bc_inject(bc_maps)

        feat = trunk_feat
        for conv, act in self.l1_stack:
            feat = act(conv(feat))
        for lam in range(2, level + 1):
            up = ad.upsample_nearest2d(feat, 2)
            trunk_up = ad.upsample_nearest2d(trunk_feat, 2 ** (lam - 1))
            feat = self.blocks[lam - 2](up + trunk_up)

        pre = self.heads[level - 1](feat)  # (b, d, d, 1)
        d = d0 * 2 ** (level - 1)
        # column-major flatten: vector[i + d*j] = map[row i, col j]
        vec = pre.reshape(b, d, d).transpose((0, 2, 1)).reshape(b, d * d)
        mu = vec.mean(axis=1).reshape(b, 1)
        centered = vec - mu
        rms = ((centered * centered).mean(axis=1).reshape(b, 1) + 1e-6) ** 0.5
        logit = ad.Tensor(np.log(m_tar / (1.0 - m_tar)).astype(self.arch.dtype))
        pre = (self.head_gains[level - 1] * (centered / rms)
               + self.fill_gains[level - 1] * logit)
        if strain_z is not None:
            z = strain_z
            for _ in range(level - 1):
                z = z.repeat(2, axis=1).repeat(2, axis=2)
            zvec = z.transpose(0, 2, 1).reshape(b, d * d)
            pre = pre + self.strain_gains[level - 1] * ad.Tensor(zvec)
        if project_fill:
            # the counterpart of the volume constraint a conventional
            # optimizer enforces via its Lagrange multiplier; the network
            # only shapes where material goes
            return ad.sigmoid_with_mean(pre, m_tar[:, 0])
        return ad.sigmoid(pre)

    def predict(self, sample: InputSample, level: int,
                x_min: float = X_MIN_DEFAULT) -> DensityField:
        """Single-sample prediction, clamped into [x_min, 1] for evaluation."""
        out = self.forward(sample.input_vector()[None, :], level,
                           project_fill=True)
        lvl = Level(level, self.arch.d_inp)
        return DensityField(lvl, np.asarray(out.data[0], dtype=float)).clamped(x_min)


# -- serialization ------------------------------------------------------------


def save_model(predictor: Predictor, path: str, extra_manifest: dict | None = None):
    """Write a model directory: JSON manifest + raw little-endian float32 blob."""
    params = predictor.named_parameters()
    os.makedirs(path, exist_ok=True)
    tensors = []
    chunks = []
    offset = 0
    for name, p in params.items():
        if p.data.dtype != np.float32:
            raise ValueError(
                f"model files store float32 parameters; {name} is {p.data.dtype}"
            )
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        tensors.append(
            {"name": name, "shape": list(p.data.shape), "offset": offset,
             "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": MODEL_FORMAT_VERSION,
        "architecture": predictor.arch.to_dict(),
        "arch_hash": predictor.arch.arch_hash(),
        "tensors": tensors,
        "weights_sha256": hashlib.sha256(blob).hexdigest(),
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    tmp = os.path.join(path, WEIGHTS_NAME + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, os.path.join(path, WEIGHTS_NAME))
    tmp = os.path.join(path, MANIFEST_NAME + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2)
    os.replace(tmp, os.path.join(path, MANIFEST_NAME))


def read_manifest(path: str) -> dict:
    try:
        with open(os.path.join(path, MANIFEST_NAME)) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelLoadError(f"cannot read model manifest at {path}: {exc}") from exc


def load_model(path: str, expected_arch: ArchitectureConfig | None = None) -> Predictor:
    """Load a model directory; bit-exact inverse of :func:`save_model`."""
    manifest = read_manifest(path)
    if manifest.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelLoadError(
            f"unsupported model format version {manifest.get('format_version')}"
        )
    arch = ArchitectureConfig.from_dict(manifest["architecture"])
    if manifest["arch_hash"] != arch.arch_hash():
        raise ModelLoadError(
            f"architecture hash mismatch: manifest says {manifest['arch_hash']}, "
            f"recomputed {arch.arch_hash()}"
        )
    if expected_arch is not None and arch != expected_arch:
        raise ModelLoadError(
            f"architecture mismatch: expected hash {expected_arch.arch_hash()}, "
            f"found {arch.arch_hash()}"
        )
    with open(os.path.join(path, WEIGHTS_NAME), "rb") as fh:
        blob = fh.read()
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["weights_sha256"]:
        raise ModelLoadError(
            f"weights checksum mismatch: manifest says {manifest['weights_sha256']}, "
            f"file has {digest} (truncated or corrupted)"
        )
    predictor = Predictor(arch)
    params = predictor.named_parameters()
    seen = set()
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in params:
            raise ModelLoadError(f"unknown tensor {name!r} in manifest")
        p = params[name]
        expected_shape = tuple(entry["shape"])
        if p.data.shape != expected_shape:
            raise ModelLoadError(
                f"tensor {name!r} has shape {expected_shape} in file, "
                f"architecture expects {p.data.shape}"
            )
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ModelLoadError(f"weights blob truncated at tensor {name!r}")
        p.data = np.frombuffer(raw, dtype="<f4").reshape(expected_shape).copy()
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise ModelLoadError(f"tensors missing from model file: {sorted(missing)}")
    return predictor
