from .config import ConfigError, RunConfig, config_from_dict, parse_config
from .export import export_tsne_inputs, load_tsne_inputs
from .pipeline import Pipeline, StageError, run_pipeline, sweep_retrieval_depth
from .synth import SynthSpec, generate, make_synthetic_corpus
from .matrix import experiment_matrix, run_matrix
