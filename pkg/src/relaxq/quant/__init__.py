from .grid import Mode, NoiseModel, QuantGrid, QuantizerState, RelaxationParams, init_grid_params
from .relaxed import (
    CategoricalOverGrid,
    categorical_probs,
    concrete_sample,
    grid_points,
    hard_quantize,
    interval_edges,
    interval_mass,
    local_window,
    nearest_index,
    quantize,
    round_half_away,
    soft_quantize,
    st_quantize,
    stochastic_round,
    stochastic_round_probs,
    window_offsets,
    window_probs,
)
