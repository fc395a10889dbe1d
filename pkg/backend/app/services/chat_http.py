import os
from typing import Optional

import httpx

from app.errors import ConfigurationError, RetryableBackendError, ResponseParseError, classify_status
from app.models import BackendSpec, GenerationRequest


class ChatHTTPBackend:
    """Any OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(self, spec: BackendSpec, transport: Optional[httpx.AsyncBaseTransport] = None):
        if not spec.endpoint:
            raise ConfigurationError(f"backend '{spec.name}' needs an endpoint URL")
        headers = {"Content-Type": "application/json"}
        if spec.auth_env:
            token = os.getenv(spec.auth_env)
            if not token:
                raise ConfigurationError(f"{spec.auth_env} not set (backend '{spec.name}')")
            headers["Authorization"] = f"Bearer {token}"
        self.name = spec.name
        self.spec = spec
        self.client = httpx.AsyncClient(
            base_url=spec.endpoint.rstrip("/"),
            headers=headers,
            timeout=spec.timeout_s,
            transport=transport,
        )

    def _payload(self, request: GenerationRequest) -> dict:
        payload = {
            "model": self.spec.model,
            "messages": [{"role": "user", "content": request.prompt_text}],
        }
        if self.spec.temperature is not None:
            payload["temperature"] = self.spec.temperature
        if self.spec.max_output_tokens is not None:
            payload["max_tokens"] = self.spec.max_output_tokens
        return payload

    async def complete(self, request: GenerationRequest) -> str:
        try:
            response = await self.client.post("/chat/completions", json=self._payload(request))
        except httpx.TransportError as e:
            raise RetryableBackendError(f"transport error: {e}") from e

        if response.status_code >= 400:
            err = classify_status(response.status_code)
            raise err(f"HTTP {response.status_code}: {response.text[:300]}", status_code=response.status_code)

        try:
            data = response.json()
            content = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise ResponseParseError("structure", f"unexpected completion body: {e}") from e
        return content or ""

    async def aclose(self) -> None:
        await self.client.aclose()
