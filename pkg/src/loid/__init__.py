"""Low-rank review-encoder plugins merged by drop-and-rescale, with ID-aligned rating prediction."""

from .adapters import (
    FormatError, LoraAdapter, MergeSpec, apply_adapter, dare_drop_rescale, dare_merge, delta_of, init_adapter,
    init_adapter_for, load_adapter, load_encoder, save_adapter, save_encoder,
)
from .data import (
    HistoryIndex, Interaction, SynthSpec, build_history_index, domain_similarity, gen_synthetic, load_reviews,
    sample_history, split,
)
from .heads import IdEmbeddings, PredictHead, fuse, mse_loss, predict, total_loss, triplet_loss
from .pipeline import (
    TargetModel, TrainConfig, evaluate, pretrain_source, run_transfer_experiment, train_target,
)
from .textenc import AttachPoint, EncoderConfig, EncoderParams, Vocab, build_vocab, encode, init_encoder, tokenize

__version__ = "0.1.0"
