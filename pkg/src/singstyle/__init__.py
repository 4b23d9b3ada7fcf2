"""Zero-shot singing voice synthesis with style transfer and multi-level style control."""
from .config import Config
from .corpus import GlobalStyleLabel, MelSpectrogram, Note, UtteranceRecord, load_corpus, write_corpus
from .infer import SynthesisOutput, evaluate, infer_control, infer_transfer, reconstruct
from .model import SingingModel
from .train import train_stage1, train_stage2

__version__ = "0.1.0"
