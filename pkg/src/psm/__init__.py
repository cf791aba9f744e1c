"""Prefix-scannable sequence models: Blelloch scans over arbitrary aggregators."""

from .scan_engine import (
    IDENTITY,
    Aggregator,
    CounterState,
    OnlineScanner,
    ScanTrace,
    counter_emit,
    counter_insert,
    scan_online,
    scan_static,
    verify_duality,
)

__version__ = "0.1.0"
