"""Detecting VR familiarity from dominant-hand motion during PIN entry."""

from .data import (
    ChannelStats,
    Dataset,
    DuplicateKey,
    EmptyInput,
    FrameSample,
    MalformedRow,
    Modality,
    NonMonotoneTime,
    PINS,
    Participant,
    Trial,
    UnknownPin,
    ValidationReport,
    fit_channel_stats,
    normalize,
    parse_dataset,
    validate,
    write_dataset,
)
from .experiments import (
    EvalResult,
    GridResult,
    RocCurve,
    ScenarioConfig,
    SingleClassTestSet,
    build_report,
    derive_seed,
    evaluate_cell,
    grid_to_jsonable,
    load_results_json,
    roc_auc,
    run_cell,
    run_grid,
    train_cell,
    write_report,
    write_results_csv,
    write_results_json,
)
from .models import (
    MODEL_NAMES,
    WindowTooShort,
    build_fcn,
    build_inception,
    build_mlp,
    build_model,
)
from .nn import (
    Adam,
    LossConfig,
    Mode,
    ModelGraph,
    NoCachedForward,
    NonFiniteOutput,
    ShapeMismatch,
    ce_logit_grad,
    label_smoothed_ce,
    load_model,
    save_model,
    smoothed_labels,
)
from .synth import (
    EXPERT_PROFILE,
    NOVICE_PROFILE,
    KeypadLayout,
    MotionProfile,
    default_keypad,
    min_jerk_segment,
    synth_dataset,
    synth_trial,
)
from .windowing import (
    DegenerateSplit,
    EmptyScenario,
    LabeledWindow,
    Scenario,
    SplitSpec,
    WINDOW_GRID,
    build_scenario,
    extract_windows,
    split_participants,
    window_count,
)

__version__ = "0.1.0"
