from .captioner import Captioner, CaptionerConfig, caption_loss
from .diffuser import (
    Diffuser,
    DiffuserConfig,
    NoiseSchedule,
    add_noise,
    one_step_x0,
)

__all__ = [
    "Captioner", "CaptionerConfig", "caption_loss",
    "Diffuser", "DiffuserConfig", "NoiseSchedule", "add_noise", "one_step_x0",
]
