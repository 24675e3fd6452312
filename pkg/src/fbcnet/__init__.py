"""FBCNet motor-imagery EEG classifier on a small numpy autodiff core."""
from .data import EEGDataset, EEGTrial, SynthConfig, generate_synthetic, load_dataset, save_dataset
from .evaluation import EvalReport, make_folds, metrics, run_cv, run_ho
from .filterbank import FilterBank, make_filter_bank, multi_view
from .interpret import deeplift_rescale, subject_relevance
from .model import FBCNet, ModelConfig, build_model, predict
from .tensor import Tensor, gradient_check
from .trainer import TrainLog, TrainPlan, fit

__version__ = "0.1.0"
