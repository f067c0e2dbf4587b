"""cads-forge: committee-driven multimodal QA data synthesis.

A cyclic pipeline: a committee of chat models jointly synthesizes
question/image/answer instances, the same committee judges each instance by
independently solving it, unsolvable instances are filtered out, and the
instances the judges split on drive an adversarial refinement of the
generation context for later iterations.
"""

__version__ = "0.1.0"

from .config import ConfigError, PipelineConfig, load_config, load_seeds
from .gateway import (
    AssetStore,
    ChatRequest,
    ChatResponse,
    ExhaustedRetries,
    GatewayError,
    GenerationRefused,
    ImageRequest,
    ImageResult,
    MalformedResponse,
    ModelEndpoint,
    ModelGateway,
    ParseError,
    ScriptedBackend,
    Timeout,
    load_script,
)
from .generate import (
    AllAnalysesFailed,
    DraftProblem,
    InstanceGenerator,
    MetaStrategy,
    RationaleAnalysis,
    RoundFailed,
    SeedItem,
    SynthInstance,
    SynthesisStrategy,
    UnparsableDraft,
    UnparsableStrategy,
    merge_analyses,
)
from .judge import (
    ADVERSARIAL,
    ConsensusReport,
    JudgeCommittee,
    JudgeVerdict,
    REJECTED,
    UNANIMOUS,
    consensus,
    extract_answer,
    match_answers,
)
from .optimizer import (
    AdversarialInsight,
    ContextRegistry,
    GenerationContext,
    Reflector,
    optimize_context,
    select_adversarial,
)
from .orchestrator import Orchestrator, PromptCapture, RunSummary
from .store import (
    EmptyExport,
    ManifestRecord,
    ManifestStore,
    PipelineCheckpoint,
    export,
    load_checkpoint,
    load_manifest,
    save_checkpoint,
    stats,
)
from .templates import PromptLibrary, TemplateError, default_templates_dir
