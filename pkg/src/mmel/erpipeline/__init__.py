"""Entity-representation enhancement: knowledge-base extracts and chat-model introductions."""
from mmel.erpipeline.builder import (
    FOLLOW_UP_PROMPT,
    SYSTEM_PROMPT,
    ERBuild,
    ERCache,
    ERPipeline,
    RefusalDetector,
    apply_builds,
    build_dynamic_er,
    build_static_er,
    report_enhancement,
)
from mmel.erpipeline.cleaning import clean_text
from mmel.erpipeline.clients import (
    NOT_FOUND,
    ChatCompletionClient,
    ClientError,
    FixtureKBClient,
    FixtureLLMClient,
    FixtureMissError,
    RetryPolicy,
    TransportError,
    WikipediaClient,
)

__all__ = [
    "FOLLOW_UP_PROMPT", "SYSTEM_PROMPT", "ERBuild", "ERCache", "ERPipeline", "RefusalDetector", "apply_builds",
    "build_dynamic_er", "build_static_er", "report_enhancement", "clean_text", "NOT_FOUND",
    "ChatCompletionClient", "ClientError", "FixtureKBClient", "FixtureLLMClient", "FixtureMissError",
    "RetryPolicy", "TransportError", "WikipediaClient",
]
