from .client import (
    Gateway,
    GatewayConfig,
    GatewayError,
    GatewayHTTPError,
    GatewayMode,
    GatewayResponseError,
    GatewayTimeout,
)
from .prompts import PromptError, PromptTemplate, TemplateId, render_prompt
from .stub import StubModels, StubServer, start_stub_server

__all__ = [
    "Gateway",
    "GatewayConfig",
    "GatewayError",
    "GatewayHTTPError",
    "GatewayMode",
    "GatewayResponseError",
    "GatewayTimeout",
    "PromptError",
    "PromptTemplate",
    "StubModels",
    "StubServer",
    "TemplateId",
    "render_prompt",
    "start_stub_server",
]
