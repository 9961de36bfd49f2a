"""Perceptual-indistinguishability image obfuscation on a synthetic latent world."""

from .core import Dataset, LatentCode, MalformedDataError, ParameterError, PrivacyParams, SemanticLabel, TrainConfig
from .mechanism import sample_noise
from .pinet import PINet, TrainingDiverged, train
from .world import LinearGenerator, PopulationSpec, generate_population

__version__ = "0.1.0"
