"""Mixture-of-experts CTR backbone with per-domain masked mixing.

Layout: a shared embedding table feeds a bank of small expert networks,
grouped by owning domain and concatenated in domain order. Each domain has
a gate (affine map over the input, softmaxed across all experts), and a
tower mapping the mixed representation to a click probability. A domain's
mask is an additive {0, -inf} vector over experts: -inf entries knock the
corresponding experts out of the gate softmax, so unselected domains'
experts receive exactly zero mixing weight and exactly zero gradient. The
mask is added to the raw gate logits before the softmax; an all-zero mask
reproduces the unmasked network bit for bit.

Masked-out experts are skipped entirely in both directions, which makes the
zero-weight/zero-gradient guarantees structural rather than numerical.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ConfigError, DataError, InvariantError, UsageError
from .nn import Mlp, Param, masked_softmax, softmax_backward, uniform_init

__all__ = ["Backbone", "build_mask", "expert_owners"]


def expert_owners(expert_counts) -> np.ndarray:
    """Owning domain id for each expert slot, in concatenation order."""
    counts = np.asarray(expert_counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0 or np.any(counts < 1):
        raise ConfigError(f"expert counts must be positive: {expert_counts}")
    return np.repeat(np.arange(counts.size), counts)


def build_mask(selected, expert_counts) -> np.ndarray:
    """Additive masks, one row per domain, from the selected-subset map.

    Entry (d, i) is 0 when expert i's owner is in selected[d], else -inf.
    Every domain must select itself.
    """
    owners = expert_owners(expert_counts)
    num_domains = len(expert_counts)
    if len(selected) != num_domains:
        raise ConfigError(
            f"{len(selected)} subsets for {num_domains} domains")
    masks = np.full((num_domains, owners.size), -np.inf)
    for d, subset in enumerate(selected):
        subset = set(int(s) for s in subset)
        if d not in subset:
            raise InvariantError(
                f"domain {d} must belong to its own subset, got {sorted(subset)}")
        bad = [s for s in subset if not 0 <= s < num_domains]
        if bad:
            raise ConfigError(f"domain {d} selects unknown domains {bad}")
        masks[d, np.isin(owners, list(subset))] = 0.0
    return masks


class Backbone:
    """The full network; one instance owns all parameters."""

    def __init__(self, vocab_sizes, embed_dim: int, expert_counts,
                 expert_hidden: int, repr_dim: int, tower_hidden: int,
                 rng: np.random.Generator):
        if embed_dim < 1 or expert_hidden < 1 or repr_dim < 1 or tower_hidden < 1:
            raise ConfigError("all layer sizes must be >= 1")
        self.vocab_sizes = tuple(int(v) for v in vocab_sizes)
        self.embed_dim = int(embed_dim)
        self.expert_counts = [int(c) for c in expert_counts]
        self.expert_hidden = int(expert_hidden)
        self.repr_dim = int(repr_dim)
        self.tower_hidden = int(tower_hidden)
        self.num_domains = len(self.expert_counts)
        self.owners = expert_owners(self.expert_counts)
        self.num_experts = int(self.owners.size)
        self.x_dim = len(self.vocab_sizes) * self.embed_dim

        self.embeddings = [
            Param(f"embedding.f{j}", uniform_init(rng, (v, self.embed_dim),
                                                  self.embed_dim))
            for j, v in enumerate(self.vocab_sizes)]
        self.experts = []
        for d, count in enumerate(self.expert_counts):
            for k in range(count):
                self.experts.append(Mlp.build(
                    f"expert.d{d}e{k}",
                    [self.x_dim, self.expert_hidden, self.repr_dim],
                    ["relu", "linear"], rng))
        self.gate_w = [Param(f"gate.d{d}.w",
                             uniform_init(rng, (self.num_experts, self.x_dim),
                                          self.x_dim))
                       for d in range(self.num_domains)]
        self.gate_b = [Param(f"gate.d{d}.b", np.zeros(self.num_experts))
                       for d in range(self.num_domains)]
        self.towers = [Mlp.build(f"tower.d{d}",
                                 [self.repr_dim, self.tower_hidden, 1],
                                 ["relu", "sigmoid"], rng)
                       for d in range(self.num_domains)]
        self._cache = None

    # ---------------------------------------------------------------- pieces

    def full_masks(self) -> np.ndarray:
        """Masks for every-domain-shares-everything (all zeros)."""
        return np.zeros((self.num_domains, self.num_experts))

    def embed(self, features: np.ndarray) -> np.ndarray:
        """Concatenate per-field embedding rows into the input vector."""
        features = np.asarray(features, dtype=np.int64)
        if features.ndim != 2 or features.shape[1] != len(self.vocab_sizes):
            raise UsageError(
                f"features must be (n, {len(self.vocab_sizes)}), "
                f"got {features.shape}")
        pieces = []
        for j, (emb, vocab) in enumerate(zip(self.embeddings, self.vocab_sizes)):
            col = features[:, j]
            if col.size and (col.min() < 0 or col.max() >= vocab):
                raise DataError(
                    f"field {j} index outside [0, {vocab})")
            pieces.append(emb.values[col])
        return np.concatenate(pieces, axis=1)

    def expert_outputs(self, x: np.ndarray, cache: bool = False) -> list:
        """Every expert applied to x, in concatenation order."""
        return [e.forward(x, cache=cache) for e in self.experts]

    def gate_logits(self, x: np.ndarray, d: int) -> np.ndarray:
        return x @ self.gate_w[d].values.T + self.gate_b[d].values

    def gate_weights(self, x: np.ndarray, d: int,
                     mask: np.ndarray | None = None) -> np.ndarray:
        if mask is None:
            mask = np.zeros(self.num_experts)
        return masked_softmax(self.gate_logits(x, d), mask)

    @staticmethod
    def mix(gate: np.ndarray, expert_outs: list) -> np.ndarray:
        """Gate-weighted sum of expert outputs."""
        if gate.shape[-1] != len(expert_outs):
            raise UsageError(
                f"gate covers {gate.shape[-1]} experts, got {len(expert_outs)}")
        h = np.zeros_like(expert_outs[0])
        for i, out in enumerate(expert_outs):
            h += gate[:, i:i + 1] * out
        return h

    # ------------------------------------------------------------- full pass

    def forward_domain(self, features: np.ndarray, d: int,
                       masks: np.ndarray | None = None, cache: bool = True):
        """Predictions and mixed representation for one domain's batch.

        Experts masked out for domain d are never evaluated; their mixing
        weight is exactly zero by masked-softmax construction.
        """
        if not 0 <= d < self.num_domains:
            raise UsageError(f"domain {d} outside [0, {self.num_domains})")
        mask = (np.zeros(self.num_experts) if masks is None
                else np.asarray(masks[d], dtype=np.float64))
        x = self.embed(features)
        active = np.flatnonzero(mask == 0.0)
        gate = masked_softmax(self.gate_logits(x, d), mask)
        outs = {int(i): self.experts[i].forward(x, cache=cache) for i in active}
        h = np.zeros((x.shape[0], self.repr_dim))
        for i, out in outs.items():
            h += gate[:, i:i + 1] * out
        preds = self.towers[d].forward(h, cache=cache).ravel()
        if cache:
            self._cache = {"d": d, "x": x, "features": np.asarray(features),
                           "gate": gate, "outs": outs}
        return preds, h

    def predict(self, features: np.ndarray, d: int,
                masks: np.ndarray | None = None) -> np.ndarray:
        """Forward only; no caches touched."""
        preds, _ = self.forward_domain(features, d, masks, cache=False)
        return preds

    def backward_domain(self, d: int, dpreds: np.ndarray,
                        dh_extra: np.ndarray | None = None) -> None:
        """Accumulate gradients for the domain batch just forwarded.

        dh_extra carries an additional gradient on the mixed representation
        (the prototype reconstruction term). Must directly follow a cached
        forward_domain for the same domain.
        """
        if self._cache is None or self._cache["d"] != d:
            raise UsageError(
                f"backward_domain({d}) without a matching cached forward")
        cache, self._cache = self._cache, None
        x, gate, outs = cache["x"], cache["gate"], cache["outs"]
        features = cache["features"]
        dh = self.towers[d].backward(np.asarray(dpreds).reshape(-1, 1))
        if dh_extra is not None:
            dh = dh + dh_extra
        dgate = np.zeros_like(gate)
        dx = np.zeros_like(x)
        for i, out in outs.items():
            dgate[:, i] = (out * dh).sum(axis=1)
            dx += self.experts[i].backward(gate[:, i:i + 1] * dh)
        dlogits = softmax_backward(gate, dgate)
        self.gate_w[d].grad += dlogits.T @ x
        self.gate_b[d].grad += dlogits.sum(axis=0)
        dx += dlogits @ self.gate_w[d].values
        for j in range(len(self.embeddings)):
            sl = dx[:, j * self.embed_dim:(j + 1) * self.embed_dim]
            np.add.at(self.embeddings[j].grad, features[:, j], sl)

    # ------------------------------------------------------------ parameters

    def params(self) -> list:
        out = list(self.embeddings)
        for e in self.experts:
            out += e.params()
        for d in range(self.num_domains):
            out.append(self.gate_w[d])
            out.append(self.gate_b[d])
        for t in self.towers:
            out += t.params()
        return out

    def expert_params(self, i: int) -> list:
        return self.experts[i].params()

    # ------------------------------------------------------------ checkpoint

    def _meta(self) -> dict:
        return {"vocab_sizes": list(self.vocab_sizes),
                "embed_dim": self.embed_dim,
                "expert_counts": self.expert_counts,
                "expert_hidden": self.expert_hidden,
                "repr_dim": self.repr_dim,
                "tower_hidden": self.tower_hidden}

    def save(self, path, config_hash: str = "") -> None:
        """Write every parameter tensor keyed by name, plus shape metadata
        and the config hash; round-trips bit-exactly via npz."""
        arrays = {f"param:{p.name}": p.values for p in self.params()}
        arrays["meta"] = np.frombuffer(
            json.dumps({"dims": self._meta(),
                        "config_hash": config_hash}).encode(), dtype=np.uint8)
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path, expected_hash: str | None = None) -> "Backbone":
        with np.load(path) as zf:
            meta = json.loads(bytes(zf["meta"]).decode())
            dims = meta["dims"]
            if expected_hash is not None and meta["config_hash"] != expected_hash:
                raise ConfigError(
                    f"checkpoint config hash {meta['config_hash']!r} does not "
                    f"match expected {expected_hash!r}")
            net = cls(dims["vocab_sizes"], dims["embed_dim"],
                      dims["expert_counts"], dims["expert_hidden"],
                      dims["repr_dim"], dims["tower_hidden"],
                      np.random.default_rng(0))
            for p in net.params():
                key = f"param:{p.name}"
                if key not in zf:
                    raise ConfigError(f"checkpoint missing tensor {p.name!r}")
                stored = zf[key]
                if stored.shape != p.values.shape:
                    raise ConfigError(
                        f"checkpoint tensor {p.name!r} has shape {stored.shape}, "
                        f"expected {p.values.shape}")
                p.values[...] = stored
        net.config_hash = meta["config_hash"]
        return net
