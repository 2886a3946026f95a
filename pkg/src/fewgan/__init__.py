"""Few-shot GAN data-augmentation workbench.

Pre-train a conditional GAN on abundant source classes, fine-tune it on a
k-shot support set of novel classes (optionally semi-supervised), generate
synthetic examples, and measure whether they help few-shot classification,
with FID and kNN precision/recall diagnostics under a seed-randomized
class-split protocol.
"""

__version__ = "0.1.0"

from .data import (ArrayBatch, AugmentationSpec, AugmentedSet, ClassPartition, Dataset,
                   SupportSet, augment_image, load_idx_dataset, load_image_directory,
                   make_synthetic, sample_support, split_classes)
from .losses import (LossBreakdown, d_loss_semi, d_loss_supervised, g_loss_semi,
                     g_loss_supervised, infogan_loss, mixup_batch)
from .models import (Discriminator, GanArch, Generator, TrainableMask, ema_update,
                     expand_trainable_mask, extend_embeddings)
from .metrics import (FeatureSet, GaussianStats, PrecisionRecall, extract_features,
                      fake_validation_accuracy, fit_gaussian, frechet_distance,
                      knn_precision_recall)
from .classifier import (ClassifierConfig, ConvClassifier, FinetuneRegime,
                         HeadFinetuneConfig, evaluate_accuracy, finetune_classifier,
                         pretrain_classifier, replace_head)
from .train_gan import (Checkpoint, GanTrainConfig, finetune_gan, generate_augmented_set,
                        pretrain_gan)
from .harness import RunConfig, aggregate, render_report, run_pipeline

__all__ = [name for name in dir() if not name.startswith("_")]
