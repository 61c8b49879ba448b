from .layers import BatchNorm, Flatten, ForwardContext, MaxPool2x2, QuantConv2d, QuantDense, UninitializedGrid
from .model import (
    Model,
    ModelSpec,
    build_model,
    clustering_report,
    grid_distance,
    report_csv_rows,
    report_to_json,
)
