from .base import HimModel, normal_logpdf
from .conjugate import LinearRegressionModel, NormalNormalModel, linreg_model, normal_normal_posterior
from .gan import (
    BayesianGanClassifier,
    BayesianNNClassifier,
    gan_classify_forward,
    predictive_label,
    read_classification_csv,
)
from .lotka_volterra import (
    LognormalPrior,
    LotkaVolterraConfig,
    LotkaVolterraModel,
    Series,
    integrate,
    lv_prior,
    lv_simulate,
)
from .sequence import StochasticRnnModel, cfg_sample, cfg_valid, decode, encode, rnn_generate, validity_rate

__all__ = [
    "BayesianGanClassifier",
    "BayesianNNClassifier",
    "HimModel",
    "LinearRegressionModel",
    "LognormalPrior",
    "LotkaVolterraConfig",
    "LotkaVolterraModel",
    "NormalNormalModel",
    "Series",
    "StochasticRnnModel",
    "cfg_sample",
    "cfg_valid",
    "decode",
    "encode",
    "gan_classify_forward",
    "integrate",
    "linreg_model",
    "lv_prior",
    "lv_simulate",
    "normal_logpdf",
    "normal_normal_posterior",
    "predictive_label",
    "read_classification_csv",
    "rnn_generate",
    "validity_rate",
]
