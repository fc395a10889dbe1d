"""Text-generation backends.

Every backend exposes ``name``, ``async complete(request) -> str`` and
``async aclose()``. Errors are raised as ``RetryableBackendError`` or
``NonRetryableBackendError`` so the orchestrator can decide what to retry.
"""

from typing import Protocol

from app.models import BackendSpec, GenerationRequest


class TextBackend(Protocol):
    name: str

    async def complete(self, request: GenerationRequest) -> str: ...

    async def aclose(self) -> None: ...


def build_backend(spec: BackendSpec, seed: int = 0) -> TextBackend:
    if spec.provider == "mock":
        from app.services.mock import MockBackend
        return MockBackend(spec, seed=seed)
    if spec.provider == "openai-chat":
        from app.services.chat_http import ChatHTTPBackend
        return ChatHTTPBackend(spec)
    if spec.provider == "gemini":
        from app.services.gemini import GeminiBackend
        return GeminiBackend(spec)
    raise ValueError(f"unknown provider {spec.provider}")
