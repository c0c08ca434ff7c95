from .config import (ConfigFileError, DataConfig, ExperimentConfig, TrainConfig, load_config,
                     save_config)
from .dataset import load_dataset, write_dataset
from .evaluate import detect_volume, detect_volumes, evaluate, evaluate_detections, infer
from .train import (EpochLog, Trainer, TrainStateError, load_model, read_epoch_logs, sgd_step, train,
                    write_epoch_logs)
