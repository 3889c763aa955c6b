"""catreid: part-pose-guided re-identification toolkit for feral cats."""

__version__ = "0.1.0"

from .augment import AugmentConfig, augment, random_erase
from .data import (Dataset, ImageRecord, KeypointSet, ManifestError,
                   PartitionSetting, dedup_sequences, derive_entities,
                   drop_unpartitionable, load_manifest, split_train_test)
from .evaluate import (EvalProtocol, EvalReport, average_precision, evaluate,
                       evaluate_embeddings, rank_gallery)
from .export import EmbeddingTable, export_embeddings, project_2d
from .geometry import (PartConfig, PartCrop, Quad, body_axis, extract_part,
                       limb_rect, part_crops, trunk_quad)
from .losses import (LossBreakdown, LossConfig, arcface_logits, id_loss,
                     total_loss, triplet_batch_hard)
from .network import (EmbeddingSet, FullStream, PPGNetCat, StreamConfig,
                      forward_infer, load_inference_model,
                      load_training_model, param_count, save_checkpoint)
from .toydata import generate_toy_dataset
from .trainer import TrainConfig, TrainingDiverged, pk_sample, train
