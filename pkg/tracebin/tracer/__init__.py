"""Live instruction tracing of x86-64 Linux programs."""

from .collect import RunSpec, Tracer, classify_transfer, collect, collect_outcome, tracer_available

__all__ = ['RunSpec', 'Tracer', 'classify_transfer', 'collect', 'collect_outcome', 'tracer_available']
