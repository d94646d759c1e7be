"""Metric learning with a hypersphere ranking loss, a BN-neck head and re-id evaluation."""
from .embedding import EmbeddingBatch, l2_normalize, pairwise_distances
from .evalkit import EvalReport, EvalSplit, RerankConfig, evaluate, k_reciprocal_rerank, query_gallery_split
from .losses import LossBreakdown, LossConfig, GradPacket, lin_loss, m_loss, m_loss_grad, softmax_ls
from .model import ModelParams, backward, forward, init_params
from .sampler import BatchPlan, PKSampler, epoch_plan
from .synthdata import SynthSpec, SyntheticDataset, generate
from .trainer import TrainConfig, TrainLog, fit, train_step, warmup_lr

__version__ = "0.1.0"
