"""Toy conditional latent-diffusion world model with its trainer and curriculum."""
from .checkpoint import MAGIC, VERSION, CheckpointError, read_checkpoint, write_checkpoint
from .core import (
    conditioning_sequence,
    denoise_predict,
    encode_semantic,
    kl_standard_normal,
    sample,
    sample_batch,
    to_image,
    to_tensor,
    vae_decode,
    vae_encode,
)
from .curriculum import (
    Curriculum,
    CurriculumLog,
    batch_positions,
    load_model,
    read_log,
    run_curriculum,
    smoothed_losses,
)
from .data import Corpus, record_prompt
from .diffusion import DiffusionSchedule
from .model import ModelConfig, WorldModel
from .optim import TrainConfig, lr_schedule, make_optimizer
from .text import DEFAULT_VOCAB, PAD, UNK, ImageRef, Prompt, Vocab, build_vocab, segment_tokens, tokenize
from .train import TrainItem, Trainer, TrainingDivergedError, grad_check, mine_hard, model_loss, step_generator, train_vae
