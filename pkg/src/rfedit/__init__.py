"""Training-free image editing on a toy rectified-flow multimodal DiT."""

from .control import (InjectionSchedule, KVCache, MixParams, baseline_injection,
                      make_kvmix_controller, mix_kv)
from .data import PALETTE, SHAPES, ShapesSample, generate_dataset
from .flow import (EulerStep, MidpointStep, TimeGrid, fm_loss, get_solver,
                   interpolate, invert, make_schedule, sample)
from .mask import EditMask, ThresholdConfig, dilate, extract_mask, select_edit_tokens
from .metrics import MetricsReport, edit_success, masked_psnr, psnr, ssim
from .model import (AttentionController, AttentionSite, ModelConfig, ToyMMDiT,
                    VisualOverride, load_checkpoint, patchify, save_checkpoint,
                    unpatchify)
from .pipeline import (EditConfig, EditResult, edit, reconstruct,
                       run_inversion_phase, run_sampling_phase)
from .shift import ShiftParams, adain, channel_moments, latents_shift
from .text import TokenIds, Vocabulary, tokenize
from .train import TrainConfig, train_toy

__version__ = "0.1.0"
