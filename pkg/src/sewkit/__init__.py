"""Desk-scale speech pretraining models and their efficiency profiler.

The package covers the full pipeline: convolutional wave feature
extractors, squeezed Transformer context networks (standard or
relative-position attention), Gumbel-softmax quantization with the
contrastive + diversity pretraining objective, CTC fine-tuning and
decoding, and an analytic FLOPs/parameter profiler driven by the same
declarative configs that build the models.
"""

from .attention import (AttentionParams, DisentangledParams, RelPosParams,
                        disentangled_attention, multi_head_attention,
                        transformer_layer)
from .audio import AudioBuffer, load_wav, save_wav
from .context import (ContextNetwork, ContextSpec, FrameSequence, build_context,
                      context_forward, upsample, upsample_frames)
from .ctc import (CtcHead, DecodeResult, FinetuneHyper, ctc_loss, exact_decode,
                  finetune_step, greedy_decode, word_error_rate)
from .errors import (AlignmentError, ConfigError, DataError, DivergenceError,
                     GradientError, SewkitError, ShapeError)
from .optim import Adam, lr_at_step
from .pretrain import (HeadConfig, MaskSpec, PretrainHyper, ProjectionHead,
                       Quantizer, QuantizerSpec, apply_time_mask,
                       contrastive_loss, diversity_loss, pretrain_step,
                       sample_negatives)
from .profiler import ParamCount, param_count, rate_trace
from .registry import REGISTRY, Model, ModelConfig, build_model, resolve_config
from .synth import SynthCorpus, SynthSpec
from .tensor import Graph, Tensor, backward, grad_check
from .wfe import (FlopsReport, WaveFeatureExtractor, WfeSpec, build_wfe,
                  flops_report, receptive_field, wfe_output_length)

__version__ = "0.1.0"
