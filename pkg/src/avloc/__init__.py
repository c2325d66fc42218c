"""Audio-visual event localization over precomputed feature sequences:
multi-window temporal fusion with dual-domain attention, event-guided
refinement, hybrid training loss, and run-locality post-processing."""

from .harness import Model, PipelineConfig, evaluate, preset_config, train

__all__ = ["Model", "PipelineConfig", "evaluate", "preset_config", "train"]

__version__ = "0.1.0"
