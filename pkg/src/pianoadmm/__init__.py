"""Piano transcription by consensus ADMM over spectro-temporal note patterns."""

__version__ = "0.1.0"

from .tensors import (PatternDictionary, Spectrogram, adjoint_synthesize, flatten,
                      synthesize, tdv, tdv_adjoint, unflatten)
from .frontend import AudioClip, FrontendConfig, logfreq_spectrogram, read_wav
from .dictionary import build_dictionary, load_dictionary, save_dictionary
from .prox import MarkovConfig
from .admm import ObjectiveSpec, SolveOptions, solve, two_stage_solve
from .refiner import RefineOptions, refine
from .transcriber import (NoteEvent, PipelineConfig, calibrate, transcribe,
                          transcribe_spectrogram)
from .evaluation import score

__all__ = ["AudioClip", "FrontendConfig", "MarkovConfig", "NoteEvent",
           "ObjectiveSpec", "PatternDictionary", "PipelineConfig", "RefineOptions",
           "SolveOptions", "Spectrogram", "adjoint_synthesize", "build_dictionary",
           "calibrate", "flatten", "load_dictionary", "logfreq_spectrogram",
           "read_wav", "refine", "save_dictionary", "score", "solve", "synthesize",
           "tdv", "tdv_adjoint", "transcribe", "transcribe_spectrogram",
           "two_stage_solve", "unflatten"]
