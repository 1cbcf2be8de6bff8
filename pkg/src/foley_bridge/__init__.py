"""Video-synchronized audio generation on a frozen text-to-audio transformer.

The backbone is a small frozen diffusion transformer over audio latents;
all learning happens in per-block video cross-attention sublayers whose
output projections start at zero, so the untrained model is exactly the
text-only model. Includes a synthetic paired-data generator, a
deterministic trainer, an evaluation metric suite, and dataset curation.
"""

from .backbone import (
    Backbone,
    BackboneBlock,
    BackboneConfig,
    LatentSequence,
    MultiheadAttention,
    TextTokens,
    attention,
    backbone_block_forward,
    encode_prompt,
    init_backbone,
    timestep_embed,
    timestep_features,
)
from .bridge import (
    AdapterMLP,
    BridgeSublayer,
    PoolingSpec,
    RawVideoTokens,
    VideoBridge,
    VideoTokens,
    adapter_mlp,
    bridged_forward,
    init_bridge,
    pool_video,
    trainable_mask,
    trainable_parameters,
    video_cross_attention,
)
from .config import RunConfig, config_hash, model_hash, parse_config
from .curation import (
    ClipRecord,
    ScorerSpec,
    curate,
    read_manifest,
    score_filter,
    silence_filter,
    write_manifest,
)
from .diffusion import (
    TrainBatch,
    TrainConfig,
    a0_from_v,
    batch_loss,
    cfg_combine,
    corrupt,
    eps_from_v,
    eval_v_mse,
    sample,
    sample_with_model,
    schedule,
    time_grid,
    training_forward,
    training_step,
    v_target,
)
from .errors import (
    ConfigError,
    DomainError,
    FoleyBridgeError,
    GenerationError,
    IncompatibilityError,
    InputError,
    ManifestError,
    NumericError,
    PairingError,
    PoolingError,
    ShapeError,
)
from .evalsuite import (
    EmbeddingSet,
    EvalReport,
    PosteriorSet,
    default_providers,
    desync,
    eval_settings_hash,
    evaluate,
    frechet_distance,
    ib_score,
    mean_kl,
    onset_detect,
)
from .rng import RngStream
from .rope import apply_rope, rope_phases, rotate_pairs
from .synthdata import Clip, gen_clip, gen_corpus, load_clip
from .trainer import Adam, models_from_checkpoint, train_run

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
