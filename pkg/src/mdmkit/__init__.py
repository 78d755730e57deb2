"""Multimodal distribution matching: distill small synthetic image-text
embedding sets by matching agreement and discrepancy statistics on the
hypersphere."""
from .config import MdmConfig, MergeConfig, TrainConfig, load_config
from .dataio import (EmbeddingPairSet, SyntheticSet, ToySpec, gen_toy, load_pairs,
                     load_synthetic, save_pairs, save_synthetic)
from .distill import distill_step, run
from .errors import MdmError
from .experts import ExpertPool, build_pool, merge_ratio, merge_weights, sample_and_merge
from .losses import gke, infonce, mdm_loss
from .numerics import Rng
from .projector import ArchSpec, Projector, backward, encode, forward, init_random
from .retrieval import evaluate_synthetic, recall_at_k
from .seeding import select
from .sphere import KernelSpec, gram, kernel_eval, make_joint_batch

__version__ = "0.1.0"
