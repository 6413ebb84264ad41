"""Temporal-guided graph networks for grid demand forecasting."""

from .errors import ConfigError, DataError, NumericalError, TGNetError
from .grid import (
    DemandLog, DemandTensor, GridSpec, HolidayCalendar, Kind, RegionGraph, ScalePolicy, build_graph, fit_scale,
    node_features, rasterize, temporal_key, temporal_keys,
)
from .model import Batch, TGNetConfig, TGNetModel, export_tge
from .training import TrainConfig, make_examples, train

__version__ = "0.1.0"
