"""Cluster-based Reptile meta-training for adversarial colorization.

Modules: ``colorlab`` (sRGB/Lab), ``taskforge`` (descriptors, PCA, K-means),
``netcore`` (U-Net generator, discriminator), ``advloss`` (objective and
gradients), ``metatrain`` (MetalGAN and cGAN trainers), ``evalkit``
(Inception Score, sample grids), ``datapipe`` (ingest, split, batches).
"""
from .advloss import LossWeights
from .colorlab import ImageLab, ImageRGB, compose_output, denormalize, lab_to_rgb, normalize, rgb_to_lab
from .datapipe import ColorDataset, DatasetIndex, ingest, load_batch, split
from .evalkit import ScoreReport, ToyClassifier, inception_score, sample_grid
from .metatrain import TrainConfig, reptile_update, train_cgan, train_metalgan
from .taskforge import ClusterModel, RandomConvBackbone, build_clusters, kmeans, retrieve_cluster

__version__ = "0.1.0"
