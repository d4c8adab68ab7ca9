from .backends import (
    FailingBackend,
    HttpBackend,
    LlmBackend,
    MockBackend,
    RecordingBackend,
    ReplayBackend,
    TransportError,
    complete_with_retries,
    prompt_hash,
)
from .documents import (
    AugmentationFailed,
    ProfileCaps,
    ProfileGenerationFailed,
    Provenance,
    UnknownUser,
    UserProfileDoc,
    augment_catalog,
    augment_description,
    augmentation_prompt,
    build_llm_profile,
    build_manual_profile,
    history_prompt,
)
from .rerank import (
    RerankResult,
    Source,
    compose_rerank_prompt,
    extract_json_array,
    knn_result,
    parse_llm_ranking,
    rerank,
)
