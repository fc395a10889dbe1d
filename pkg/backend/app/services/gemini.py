import os

from dotenv import load_dotenv
from google import genai
from google.genai import errors as genai_errors
from google.genai import types

from app.errors import ConfigurationError, RetryableBackendError, classify_status
from app.models import BackendSpec, GenerationRequest

load_dotenv()


class GeminiBackend:
    def __init__(self, spec: BackendSpec):
        key_name = spec.auth_env or "GEMINI_API_KEY"
        api_key = os.getenv(key_name)
        if not api_key:
            raise ConfigurationError(f"{key_name} not set")
        self.name = spec.name
        self.spec = spec
        self.client = genai.Client(api_key=api_key)

    async def complete(self, request: GenerationRequest) -> str:
        config = types.GenerateContentConfig(
            temperature=self.spec.temperature,
            max_output_tokens=self.spec.max_output_tokens,
        )
        try:
            response = await self.client.aio.models.generate_content(
                model=self.spec.model,
                contents=request.prompt_text,
                config=config,
            )
        except genai_errors.APIError as e:
            raise classify_status(int(e.code or 500))(f"Gemini {e.code}: {e.message}", status_code=e.code) from e
        except (OSError, TimeoutError) as e:
            raise RetryableBackendError(f"Gemini transport error: {e}") from e

        # New SDK returns the concatenated candidate text on response.text
        return response.text or ""

    async def aclose(self) -> None:
        return None
