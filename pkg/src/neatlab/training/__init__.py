from .harness import (
    ComparisonRecord,
    Model,
    RunMetrics,
    SweepRecord,
    attach_adapters,
    compare_budget,
    construct_from_lora,
    evaluate,
    finetune,
    pretrain,
    run_sweep,
    suffix_layers,
)
from .optim import LinearSchedule, OptimizerState
from .settings import AdapterConfig, TrainConfig
from .tasks import Dataset, TaskSpec, load_csv, make_task, teacher_forward

__all__ = [
    "AdapterConfig",
    "ComparisonRecord",
    "Dataset",
    "LinearSchedule",
    "Model",
    "OptimizerState",
    "RunMetrics",
    "SweepRecord",
    "TaskSpec",
    "TrainConfig",
    "attach_adapters",
    "compare_budget",
    "construct_from_lora",
    "evaluate",
    "finetune",
    "load_csv",
    "make_task",
    "pretrain",
    "run_sweep",
    "suffix_layers",
    "teacher_forward",
]
