"""Endpoint clients: chat completions, safety classification, text-to-image.

Each remote client has a deterministic in-process mock so the pipeline
runs offline and tests reproduce bit-for-bit. The HTTP wire formats:

* chat completion: POST {model, messages:[{role,content}], temperature,
  top_p, presence_penalty, frequency_penalty, max_tokens, seed}; the
  reply's first choice message content is the raw text.
* text-to-image: POST {prompt, guidance_scale, num_inference_steps,
  width, height, seed}; the reply body is encoded image bytes.
"""

from __future__ import annotations

import threading
import time
from typing import TYPE_CHECKING

import requests

from .seeding import stable_u64

if TYPE_CHECKING:
    from .captions import PromptRequest


class EndpointError(RuntimeError):
    """Endpoint unreachable or persistently failing."""


class TtiRequestError(RuntimeError):
    """Single text-to-image request failed (non-2xx or transport error)."""


class HttpChatClient:
    """OpenAI-compatible chat completion client with retry on transient errors."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        retries: int = 3,
        backoff: float = 0.5,
    ):
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._session = requests.Session()
        if api_key:
            self._session.headers["Authorization"] = f"Bearer {api_key}"

    def _post_messages(self, messages: list[dict], sampling: dict) -> str:
        payload = {"model": self.model, "messages": messages, **sampling}
        last: Exception | None = None
        for attempt in range(self.retries):
            try:
                resp = self._session.post(self.endpoint, json=payload, timeout=self.timeout)
                if resp.status_code >= 500:
                    raise requests.RequestException(f"server error {resp.status_code}")
                if resp.status_code != 200:
                    raise EndpointError(f"chat endpoint returned {resp.status_code}")
                body = resp.json()
                content = body["choices"][0]["message"]["content"]
                if not isinstance(content, str):
                    raise EndpointError("chat endpoint returned non-string content")
                return content
            except EndpointError:
                raise
            except (requests.RequestException, KeyError, ValueError, IndexError) as exc:
                last = exc
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * 2**attempt)
        raise EndpointError(f"chat endpoint unreachable after {self.retries} attempts: {last}")

    def complete(self, request: "PromptRequest") -> str:
        s = request.sampling
        return self._post_messages(
            [{"role": "user", "content": request.prompt_text}],
            {
                "temperature": s.temperature,
                "top_p": s.top_p,
                "presence_penalty": s.presence_penalty,
                "frequency_penalty": s.frequency_penalty,
                "max_tokens": s.max_tokens,
                "seed": s.seed,
            },
        )

    def classify(self, system_prompt: str, concept: str) -> str:
        return self._post_messages(
            [
                {"role": "system", "content": system_prompt},
                {"role": "user", "content": concept},
            ],
            {
                "temperature": 0.0,
                "top_p": 1.0,
                "presence_penalty": 0.0,
                "frequency_penalty": 0.0,
                "max_tokens": 4,
                "seed": 0,
            },
        )


# Small closed vocabularies for the mock grammar. Kept short on purpose:
# captions stay inside the word budget even for multi-word concepts.
_MOCK_ADJECTIVES = (
    "weathered", "gleaming", "quiet", "crowded", "sunlit", "misty",
    "tiny", "ancient", "colorful", "lonely", "polished", "rustic",
    "shadowed", "vivid", "humble", "ornate",
)
_MOCK_VERBS = (
    "rests", "stands", "drifts", "waits", "glows", "appears",
    "lingers", "leans", "settles", "shines", "hides", "floats",
    "sits", "hangs", "emerges", "sprawls",
)
_MOCK_SETTINGS = (
    "near the harbor", "in a quiet courtyard", "under a pale sky",
    "beside the old market", "on a wooden table", "along the river path",
    "inside a bright studio", "at the forest edge", "over mossy stones",
    "by the window ledge", "under warm lanterns", "on a windy hill",
    "against a brick wall", "beneath tall pines", "in morning fog",
    "near a rusty gate",
)

_MOCK_OVERLONG = (
    "Well, let me think about {concept} for a moment because there are truly "
    "so many wonderful scenes one could imagine, ranging from busy streets "
    "to silent meadows and everything found in between them all."
)


class MockChatClient:
    """Deterministic offline chat endpoint.

    Emits a grammar-filled single-sentence caption embedding the request
    concept verbatim, keyed by a hash of the concept and the request
    seed. With ``overlong_first_reply`` the first call for each concept
    returns a rambling over-budget reply, which exercises the retry path.
    """

    def __init__(self, overlong_first_reply: bool = False):
        self.overlong_first_reply = overlong_first_reply
        self._seen: set[str] = set()
        self._lock = threading.Lock()
        self.calls = 0

    def complete(self, request: "PromptRequest") -> str:
        with self._lock:
            self.calls += 1
            if self.overlong_first_reply and request.concept not in self._seen:
                self._seen.add(request.concept)
                return _MOCK_OVERLONG.format(concept=request.concept)
        key = stable_u64("mock-caption", request.concept, request.sampling.seed)
        adj = _MOCK_ADJECTIVES[key % len(_MOCK_ADJECTIVES)]
        verb = _MOCK_VERBS[(key >> 8) % len(_MOCK_VERBS)]
        setting = _MOCK_SETTINGS[(key >> 16) % len(_MOCK_SETTINGS)]
        return f"The {adj} {request.concept} {verb} {setting}."


class MockConceptClassifier:
    """Offline safety classifier driven by an explicit denylist.

    Records every outbound (system_prompt, concept) pair so tests can
    assert the exact prompt bytes that would hit the wire. ``scripted``
    maps a concept to a fixed raw reply, e.g. "maybe", to exercise the
    unparseable-reply path.
    """

    def __init__(self, denylist: set[str] | None = None, scripted: dict[str, str] | None = None):
        self.denylist = set(denylist or ())
        self.scripted = dict(scripted or {})
        self.requests: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def classify(self, system_prompt: str, concept: str) -> str:
        with self._lock:
            self.requests.append((system_prompt, concept))
        if concept in self.scripted:
            return self.scripted[concept]
        return "1" if concept in self.denylist else "0"


class HttpTtiClient:
    """Text-to-image endpoint client; one attempt per call, retry lives upstream."""

    def __init__(self, endpoint: str, api_key: str | None = None, timeout: float = 120.0):
        self.endpoint = endpoint
        self.timeout = timeout
        self._session = requests.Session()
        if api_key:
            self._session.headers["Authorization"] = f"Bearer {api_key}"

    def generate(self, payload: dict) -> bytes:
        try:
            resp = self._session.post(self.endpoint, json=payload, timeout=self.timeout)
        except requests.RequestException as exc:
            raise TtiRequestError(f"tti request failed: {exc}") from exc
        if resp.status_code != 200:
            raise TtiRequestError(f"tti endpoint returned {resp.status_code}")
        return resp.content
