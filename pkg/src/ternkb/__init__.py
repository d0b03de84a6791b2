"""Ternary user-item-context knowledge base for click-through prediction."""
from .autograd import Adam, Tape, Tensor, adam_step, attention, bce_loss, grad_check, mlp_forward
from .backbone import RecConfig, RecModel, predict, train_rec
from .data import (Dataset, DatasetPartition, FeatureSchema, Field, Sample, Vocabulary, load_logs,
                   partition)
from .encoder import EncoderConfig, EncoderModel, train_encoder
from .kbase import (KnowledgeBase, TernaryKey, generate_kb, kb_stats, load_kb, merge_kb, save_kb,
                    update_kb)
from .kernels import BACKEND as KERNEL_BACKEND
from .metrics import auc, logloss
from .synth import SynthConfig, gen_synthetic
from .utilize import (AdaptationUnit, RetrievedKnowledge, adapt, direct_predict, gen_queries,
                      inject_concat, inject_tower, retrieve)

__version__ = "0.1.0"
