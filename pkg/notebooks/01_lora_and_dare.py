"""
Low-rank adapters and drop-and-rescale merging
==============================================

Run with ``python notebooks/01_lora_and_dare.py``.
"""

# A small random encoder to play with. Weights are stored (d_out, d_in).
import torch
from loid import EncoderConfig, MergeSpec, build_vocab, dare_drop_rescale, dare_merge, encode, init_adapter_for
from loid import delta_of, init_encoder, tokenize

vocab = build_vocab(["great sound", "poor battery", "great price", "poor fit"])
config = EncoderConfig(d_model=32, n_layers=2, n_heads=2, d_ffn=64, max_len=16)
base = init_encoder(len(vocab), config, seed=0)
print(len(vocab), "tokens,", len(base.attach_points()), "attach points")

# A fresh adapter has B = 0, so W + BA is W and the encoder output does not move.
adapter = init_adapter_for(base, rank=4, seed=1)
ids, _ = tokenize("great sound", vocab, config.max_len)
x = torch.tensor(ids)
print("identity:", torch.equal(encode(x, base), encode(x, base, adapter)))

# Give B some mass and the CLS vector shifts.
for B, _ in adapter.pairs.values():
    B.normal_(0, 0.1, generator=torch.Generator().manual_seed(2))
print("shift:", (encode(x, base, adapter) - encode(x, base)).norm().item())

# Drop-and-rescale keeps each delta entry with probability 1 - p and scales it by 1 / (1 - p).
delta = delta_of(adapter)
point = base.attach_points()[0]
dropped = dare_drop_rescale(delta, p=0.9, seed=0)[point]
print("kept fraction:", (dropped != 0).float().mean().item())

# Averaged over many masks the rescaled delta recovers the original.
trials = 5000
mean = sum(dare_drop_rescale({point: delta[point]}, 0.9, s)[point] for s in range(trials)) / trials
print("mean relative error:", ((mean - delta[point]).abs() / delta[point].abs()).mean().item())

# Merging folds the sparsified deltas into a new parameter set; the base stays untouched.
merged = dare_merge(base, MergeSpec(p=0.9, seed=0, adapters=[adapter]))
print("base checksum", base.checksum()[:12], "merged", merged.checksum()[:12])
print("p=0 merge equals W + BA:",
      torch.allclose(dare_merge(base, MergeSpec(0.0, 0, [adapter])).weight(point), base.weight(point) + delta[point]))
