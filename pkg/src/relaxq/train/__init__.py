from .checkpoint import FORMAT_TAG, CheckpointError, load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config, parse_config
from .data import Dataset, IdxFormatError, load_idx, load_mnist, make_synthetic, read_idx, scale_pixels
from .loop import (
    EvalResult,
    Trainer,
    TrainingDiverged,
    derive_seed,
    evaluate,
    load_model,
    load_splits,
    model_payload,
    quantizer_snapshot,
    round_posthoc,
    save_model,
    write_log,
)
