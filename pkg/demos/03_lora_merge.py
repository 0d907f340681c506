"""Merge a low-rank update into base weights and inspect the rank bound."""

import tempfile
from pathlib import Path

import numpy as np

from tableval import LoraUpdate, delta_rank_bound, merge, read_adapter, write_adapter


def main():
    rng = np.random.default_rng(0)
    d, k, r = 8, 6, 2
    W = rng.normal(size=(d, k))
    update = LoraUpdate(A=rng.normal(size=(d, r)), B=rng.normal(size=(r, k)), rank=r, alpha=32.0)

    literal = merge(W, update, scale_mode="paper_eq2")
    scaled = merge(W, update, scale_mode="alpha_over_r")
    print(f"W: {W.shape}, update rank {r}, alpha {update.alpha}")
    print("delta rank bound:", delta_rank_bound(update), "<= r =", r)
    print("literal merge delta norm:   ", np.linalg.norm(literal - W).round(4))
    print("alpha/r merge delta norm:   ", np.linalg.norm(scaled - W).round(4))
    print("ratio (should be alpha/r):  ", (np.linalg.norm(scaled - W) / np.linalg.norm(literal - W)).round(4))

    path = Path(tempfile.mkdtemp(prefix="lora-demo-")) / "q_proj.lora"
    write_adapter(path, "q_proj", update)
    name, loaded = read_adapter(path)
    print(f"\nadapter file round-trip: module={name}, shape={loaded.shape}, rank={loaded.rank}")
    print("max float32 round-trip error:", float(np.abs(loaded.A - update.A.astype(np.float32)).max()))


if __name__ == "__main__":
    main()
