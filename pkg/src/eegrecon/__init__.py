"""EEG-to-image decoding: multi-level semantics plus diffusion-backed
reconstruction.

The library decodes two granularities from EEG windows recorded while a
subject views an image: a pixel-level saliency map (triplet-trained
feature encoder feeding a conditional GAN) and a sample-level caption
embedding (a regressor onto text-embedding targets). A pluggable
image-to-image diffusion backend combines both into the final
reconstruction, and the metrics module scores results with N-way top-k
accuracy, Inception Score, and SSIM.
"""

from .data import (DatasetError, DatasetManifest, EegSegment, PreprocessConfig,
                   SplitManifest, StimulusImage, SyntheticSpec,
                   generate_synthetic_dataset, load_manifest, load_split,
                   preprocess_eeg, save_manifest, save_split, split_dataset)
from .diffusion import (BackendUnavailableError, DiffusionBackendDescriptor,
                        DiffusionParams, MockDiffusionBackend,
                        PretrainedDiffusionAdapter, ReconstructedImage,
                        backend_from_env, describe_backend, make_backend,
                        reconstruct, resize_saliency)
from .encoder import (EegFeature, EncoderState, TripletConfig, encode,
                      encode_batch, load_encoder, nearest_class_retrieval,
                      sample_triplets, save_encoder, train_encoder, triplet_loss,
                      triplet_loss_with_grad)
from .augment import apply_augmentation, augment_batch_with_grad
from .metrics import (ClassifierClient, EvalConfig, MetricsReport,
                      PrototypeClassifier, UniformClassifier, evaluate_run,
                      inception_score, make_classifier, n_way_top_k_accuracy,
                      ssim_metric)
from .nn import TrainingDiverged
from .pipeline import (ConfigError, ExperimentConfig, RunRecord, StageError,
                       default_synthetic_config, render_report,
                       run_ablation_matrix, run_pipeline)
from .saliency import (GanLossConfig, GanTrainConfig, LatentNoise, SaliencyMap,
                       discriminator_loss, discriminator_loss_with_grad,
                       generate_saliency, generator_adv_loss,
                       generator_adv_loss_with_grad, generator_total_loss,
                       hinge_d_loss, load_gan, mode_seeking_loss,
                       mode_seeking_loss_with_grad, save_gan, train_saliency_gan)
from .semantic import (CaptionRecord, ClientUnavailableError, EmbeddingCache,
                       MockAnnotator, MockTextEmbedder, SemanticConfig,
                       SemanticEmbedding, annotate_captions, caption_targets,
                       clip_alignment_loss, clip_alignment_loss_with_grad,
                       embed_caption, label_caption, load_semantic,
                       predict_embedding, save_semantic, train_semantic_decoder)
from .ssim import ssim, ssim_loss, ssim_with_grad

__version__ = "0.1.0"
