"""Bit-width assignment for all quantizable units of a field model."""

from __future__ import annotations

import json
from dataclasses import dataclass

BITS_MIN = 1
BITS_MAX = 8


@dataclass(frozen=True)
class QuantPolicy:
    """Per-unit bit widths: one per hash level, a (weight, activation) pair
    per MLP layer."""

    hash_bits: tuple
    mlp_bits: tuple  # ((w_bits, a_bits), ...) per layer

    def __post_init__(self):
        object.__setattr__(self, "hash_bits", tuple(int(b) for b in self.hash_bits))
        object.__setattr__(self, "mlp_bits", tuple((int(w), int(a)) for w, a in self.mlp_bits))
        for b in self.all_bits():
            if not BITS_MIN <= b <= BITS_MAX:
                raise ValueError(f"bit width {b} outside [{BITS_MIN}, {BITS_MAX}]")

    @classmethod
    def uniform(cls, bits: int, num_levels: int, num_layers: int) -> "QuantPolicy":
        return cls(hash_bits=(bits,) * num_levels, mlp_bits=((bits, bits),) * num_layers)

    @property
    def num_units(self) -> int:
        return len(self.hash_bits) + 2 * len(self.mlp_bits)

    def all_bits(self) -> list:
        """Unit bit widths in action order: hash levels, then per layer
        weight bits followed by activation bits."""
        out = list(self.hash_bits)
        for w, a in self.mlp_bits:
            out.extend((w, a))
        return out

    def with_unit(self, index: int, bits: int) -> "QuantPolicy":
        """Copy with the global unit at `index` set to `bits`."""
        n = len(self.hash_bits)
        if index < n:
            hb = list(self.hash_bits)
            hb[index] = bits
            return QuantPolicy(tuple(hb), self.mlp_bits)
        rel = index - n
        layer, slot = divmod(rel, 2)
        mb = [list(p) for p in self.mlp_bits]
        mb[layer][slot] = bits
        return QuantPolicy(self.hash_bits, tuple(tuple(p) for p in mb))


def policy_from_bits(bits, num_levels: int, num_layers: int) -> QuantPolicy:
    """Build a policy from a flat action-order bit list."""
    bits = list(bits)
    if len(bits) != num_levels + 2 * num_layers:
        raise ValueError(f"expected {num_levels + 2 * num_layers} bit entries, got {len(bits)}")
    hash_bits = tuple(bits[:num_levels])
    mlp_bits = tuple((bits[num_levels + 2 * i], bits[num_levels + 2 * i + 1]) for i in range(num_layers))
    return QuantPolicy(hash_bits, mlp_bits)


def format_policy(policy: QuantPolicy) -> str:
    """Slash-separated bit list: hash levels, then per-layer w/a pairs,
    e.g. 8/8/4/w6a8/w4a4."""
    parts = [str(b) for b in policy.hash_bits]
    parts.extend(f"w{w}a{a}" for w, a in policy.mlp_bits)
    return "/".join(parts)


def parse_policy(text: str) -> QuantPolicy:
    hash_bits = []
    mlp_bits = []
    for part in text.strip().split("/"):
        if part.startswith("w"):
            w, a = part[1:].split("a")
            mlp_bits.append((int(w), int(a)))
        else:
            if mlp_bits:
                raise ValueError("hash-level bits must precede layer pairs")
            hash_bits.append(int(part))
    return QuantPolicy(tuple(hash_bits), tuple(mlp_bits))


def write_policy_json(path, policy: QuantPolicy) -> None:
    doc = {"hash_bits": list(policy.hash_bits), "mlp_bits": [list(p) for p in policy.mlp_bits]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_policy_json(path) -> QuantPolicy:
    with open(path) as fh:
        doc = json.load(fh)
    try:
        return QuantPolicy(tuple(doc["hash_bits"]), tuple(tuple(p) for p in doc["mlp_bits"]))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed policy file: {exc}") from exc
