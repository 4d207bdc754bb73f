"""Passive radio sensing on a cloud-edge split.

CQI traces (simulated or replayed) are turned into PCA features at the
edge; the cloud combines per-gateway evidence into posteriors over a
task's latent labels and serves them over REST and WebSocket.
"""

from .artifacts import TaskArtifacts, train_task_models
from .cqi_core import CqiSeries, CqiType, FeatureRecipe, OtaProfile, SensingTask, TaskType
from .feature_pca import PcaModel, TrainingSet, project, reconstruct, train_pca
from .inference import FeatureBatch, KnnClassifier, LatentEstimate, infer, posterior

__version__ = "0.1.0"

__all__ = [
    "CqiSeries",
    "CqiType",
    "FeatureBatch",
    "FeatureRecipe",
    "KnnClassifier",
    "LatentEstimate",
    "OtaProfile",
    "PcaModel",
    "SensingTask",
    "TaskArtifacts",
    "TaskType",
    "TrainingSet",
    "infer",
    "posterior",
    "project",
    "reconstruct",
    "train_pca",
    "train_task_models",
]
