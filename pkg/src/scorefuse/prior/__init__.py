from .analytic import GaussianMixturePrior, StationaryGaussianPrior, gmm_denoise, gmm_vjp
from .network import (
    MLPDenoiser,
    TrainConfig,
    TrainingDivergedError,
    edm_loss,
    load_checkpoint,
    save_checkpoint,
    train_denoiser,
)
from .schedule import (
    Denoiser,
    NoiseSchedule,
    PreconditionCoeffs,
    linearize,
    loss_weight,
    precondition,
    precondition_coeffs,
    sample_training_sigma,
    score_from_denoiser,
)
