"""Discriminator (shared base, 5-way and 3-way heads) and complementary generator."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import BatchNorm, Dense, ShapeError, as_matrix, softmax, softmax_backward

SUP_CLASSES = ("D", "N", "H", "R", "U")
UNSUP_CLASSES = ("K", "U", "F")
D, N, H, R, U = range(5)
K, UNK, F = range(3)


@dataclass(frozen=True)
class NoiseSpec:
    dim: int
    seed: int = 0


def sample_noise(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("need at least one noise sample")
    return rng.standard_normal((n, dim))


def sample_noise_spec(n: int, spec: NoiseSpec) -> np.ndarray:
    return sample_noise(n, spec.dim, np.random.default_rng(spec.seed))


@dataclass
class DiscOutput:
    sup: np.ndarray | None
    unsup: np.ndarray | None
    features: np.ndarray


class Discriminator:
    """Shared leaky-relu base feeding a supervised (D,N,H,R,U) and an unsupervised (K,U,F) softmax head.

    ``feature_tap`` indexes the base layer whose activations serve as f(x) for
    feature matching and the pull-away term; -1 means the last base layer.
    """

    def __init__(self, n_in: int, widths: Sequence[int] = (128, 64, 32), feature_tap: int = -1, seed: int = 0):
        if not widths:
            raise ValueError("discriminator needs at least one base layer")
        rng = np.random.default_rng(seed)
        self.base = []
        prev = n_in
        for w in widths:
            self.base.append(Dense(prev, w, "leaky_relu", rng))
            prev = w
        self.sup_head = Dense(prev, len(SUP_CLASSES), "identity", rng)
        self.unsup_head = Dense(prev, len(UNSUP_CLASSES), "identity", rng)
        if not -len(widths) <= feature_tap < len(widths):
            raise ValueError(f"feature_tap {feature_tap} does not address one of {len(widths)} base layers")
        self.feature_tap = feature_tap % len(widths)
        self._probs = {}

    @property
    def n_in(self) -> int:
        return self.base[0].n_in

    @property
    def widths(self) -> list[int]:
        return [layer.n_out for layer in self.base]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.base):
            out[f"base{i}.W"] = layer.W
            out[f"base{i}.b"] = layer.b
        for name, layer in (("sup", self.sup_head), ("unsup", self.unsup_head)):
            out[f"{name}.W"] = layer.W
            out[f"{name}.b"] = layer.b
        return out

    def forward(self, x, head: str = "both") -> DiscOutput:
        if head not in ("supervised", "unsupervised", "both"):
            raise ValueError(f"unknown head {head!r}")
        h = as_matrix(x)
        if h.shape[1] != self.n_in:
            raise ShapeError(f"input of shape {h.shape} does not match discriminator input width {self.n_in}")
        feats = None
        for i, layer in enumerate(self.base):
            h = layer.forward(h)
            if i == self.feature_tap:
                feats = h
        self._probs = {}
        sup = unsup = None
        if head in ("supervised", "both"):
            sup = softmax(self.sup_head.forward(h))
            self._probs["sup"] = sup
        if head in ("unsupervised", "both"):
            unsup = softmax(self.unsup_head.forward(h))
            self._probs["unsup"] = unsup
        return DiscOutput(sup, unsup, feats)

    def backward(self, d_sup=None, d_unsup=None, d_feat=None) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Backpropagate gradients w.r.t. head probabilities and/or tapped features.

        Returns parameter gradients (keys as in ``params``) and the input gradient.
        Base-layer gradients sum the contributions of every head supplied.
        """
        if not self._probs:
            raise RuntimeError("backward called without a cached forward pass")
        grads = {}
        d_h = np.zeros((self.base[-1]._cache[2].shape[0], self.base[-1].n_out))
        for name, layer, d in (("sup", self.sup_head, d_sup), ("unsup", self.unsup_head, d_unsup)):
            if d is None:
                grads[f"{name}.W"] = np.zeros_like(layer.W)
                grads[f"{name}.b"] = np.zeros_like(layer.b)
                continue
            if name not in self._probs:
                raise RuntimeError(f"{name} head was not evaluated in the cached forward pass")
            d_logits = softmax_backward(self._probs[name], d)
            g, d_in = layer.backward(d_logits)
            grads[f"{name}.W"], grads[f"{name}.b"] = g["W"], g["b"]
            d_h = d_h + d_in
        for i in reversed(range(len(self.base))):
            if i == self.feature_tap and d_feat is not None:
                d_h = d_h + d_feat
            g, d_h = self.base[i].backward(d_h)
            grads[f"base{i}.W"], grads[f"base{i}.b"] = g["W"], g["b"]
        return grads, d_h

    def header(self) -> dict:
        return {
            "kind": "discriminator",
            "n_in": self.n_in,
            "widths": self.widths,
            "feature_tap": self.feature_tap,
            "sup_classes": list(SUP_CLASSES),
            "unsup_classes": list(UNSUP_CLASSES),
        }

    @classmethod
    def from_header(cls, hdr: dict) -> "Discriminator":
        return cls(hdr["n_in"], hdr["widths"], hdr["feature_tap"])


class Generator:
    """dense(leaky-relu) -> batch norm -> dense(relu), mapping noise to feature space."""

    def __init__(self, noise_dim: int, output_dim: int, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.fc1 = Dense(noise_dim, hidden, "leaky_relu", rng)
        self.bn = BatchNorm(hidden)
        self.fc2 = Dense(hidden, output_dim, "relu", rng)
        self.layers = (self.fc1, self.bn, self.fc2)

    @property
    def noise_dim(self) -> int:
        return self.fc1.n_in

    @property
    def output_dim(self) -> int:
        return self.fc2.n_out

    @property
    def hidden(self) -> int:
        return self.fc1.n_out

    def params(self) -> dict[str, np.ndarray]:
        return {
            "fc1.W": self.fc1.W, "fc1.b": self.fc1.b,
            "bn.gamma": self.bn.gamma, "bn.beta": self.bn.beta,
            "fc2.W": self.fc2.W, "fc2.b": self.fc2.b,
        }

    def buffers(self) -> dict[str, np.ndarray]:
        return {"bn.running_mean": self.bn.running_mean, "bn.running_var": self.bn.running_var}

    def forward(self, z, train: bool = True) -> np.ndarray:
        z = as_matrix(z)
        if z.shape[1] != self.noise_dim:
            raise ShapeError(f"noise of shape {z.shape} does not match generator noise_dim {self.noise_dim}")
        h = self.fc1.forward(z)
        h = self.bn.forward(h, train=train)
        return self.fc2.forward(h)

    def backward(self, d_out: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        g2, d = self.fc2.backward(d_out)
        gb, d = self.bn.backward(d)
        g1, dz = self.fc1.backward(d)
        grads = {
            "fc1.W": g1["W"], "fc1.b": g1["b"],
            "bn.gamma": gb["gamma"], "bn.beta": gb["beta"],
            "fc2.W": g2["W"], "fc2.b": g2["b"],
        }
        return grads, dz

    def header(self) -> dict:
        return {"kind": "generator", "noise_dim": self.noise_dim, "output_dim": self.output_dim, "hidden": self.hidden}

    @classmethod
    def from_header(cls, hdr: dict) -> "Generator":
        return cls(hdr["noise_dim"], hdr["output_dim"], hdr["hidden"])


def model_arrays(disc: Discriminator, gen: Generator | None) -> dict[str, np.ndarray]:
    arrays = {f"D.{k}": v for k, v in disc.params().items()}
    if gen is not None:
        arrays.update({f"G.{k}": v for k, v in gen.params().items()})
        arrays.update({f"G.{k}": v for k, v in gen.buffers().items()})
    return arrays


def model_header(disc: Discriminator, gen: Generator | None, extra: dict | None = None) -> str:
    hdr = {"discriminator": disc.header(), "generator": gen.header() if gen is not None else None}
    if extra:
        hdr.update(extra)
    return json.dumps(hdr, sort_keys=True)


def load_into(obj_params: dict[str, np.ndarray], arrays: dict[str, np.ndarray], prefix: str) -> None:
    for k, target in obj_params.items():
        src = arrays[f"{prefix}.{k}"]
        if src.shape != target.shape:
            raise ShapeError(f"checkpoint array {prefix}.{k} has shape {src.shape}, model expects {target.shape}")
        target[...] = src


def build_models(header: dict, arrays: dict[str, np.ndarray]) -> tuple[Discriminator, Generator | None]:
    disc = Discriminator.from_header(header["discriminator"])
    load_into(disc.params(), arrays, "D")
    gen = None
    if header.get("generator"):
        gen = Generator.from_header(header["generator"])
        load_into(gen.params(), arrays, "G")
        load_into(gen.buffers(), arrays, "G")
    return disc, gen
