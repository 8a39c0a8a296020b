"""uniticl: a desk-scale testbed for warmup-trained in-context learning on
discrete-unit sequence classification.

Pipeline: synthetic class-conditioned feature streams are quantized to
discrete units by a k-means codebook (`tasks`); a miniature causal
transformer is pretrained on unit streams (`lm`); warmup training tunes
per-layer prompt prefixes with a label-prediction loss on demonstration
episodes (`episodes`, `train`); evaluation measures in-context-learning
accuracy, guessing rate, attention profiles, and baselines (`evaluate`);
the `cli` module ties it into reproducible experiment runs.
"""

from ._alloc import tune_allocator

tune_allocator()

from .episodes import (
    Dataset,
    Demonstration,
    Episode,
    Verbalizer,
    assemble,
    build_balanced_dataset,
    build_verbalizer,
    fit_length,
    sample_icl_episode,
    sample_warmup_episode,
)
from .lm import (
    ForwardTrace,
    LmConfig,
    ModelParams,
    PromptBank,
    backward,
    forward,
    init_model,
    loss_ce,
    predict_label,
    pretrain,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .tasks import (
    Codebook,
    Difficulty,
    TaskSpec,
    fit_task_codebook,
    gen_task_spec,
    kmeans_fit,
    quantize,
    sample_features,
    sample_utterance,
)
from .train import WarmupConfig, calibrate_label_embeddings, finetune_warmup, init_prompts, warmup_train
from .evaluate import (
    AttentionProfile,
    EvalReport,
    attention_profile,
    eval_accuracy,
    guessing_rate,
    histogram_features,
    linear_clf_fit,
    linear_clf_predict,
    random_baseline,
)
from .vocab import VocabLayout

__version__ = "0.1.0"
