from __future__ import annotations

from pathlib import Path

import pytest
from PIL import Image

from cas_seat.corpus_io import AnswerType, SampleRecord
from cas_seat.ddf import probe_temperature
from cas_seat.gateway import ClientConfig, MockBackend, ModelClient
from cas_seat.prompts import TemplateId, render


def make_image(path: Path, width: int = 64, height: int = 64, color=(40, 90, 160)) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("RGB", (width, height), color).save(path)
    return path


def make_record(
    ident: str,
    image_ref: str = "img.png",
    question: str | None = None,
    gold: str = "B",
    answer_type: AnswerType = AnswerType.OPTION_LETTER,
    choices: list[str] | None = None,
    **kwargs,
) -> SampleRecord:
    if answer_type is AnswerType.OPTION_LETTER and choices is None:
        choices = ["first", "second", "third", "fourth"]
    return SampleRecord(
        id=ident,
        image_ref=image_ref,
        question=question or f"What is shown in sample {ident}?",
        gold_answer=gold,
        answer_type=answer_type,
        choices=choices,
        **kwargs,
    )


def make_client(
    tmp_path: Path,
    script: dict | None = None,
    image_root: Path | None = None,
    cache: bool = False,
    model_id: str = "mock-teacher",
    **config_kwargs,
) -> tuple[ModelClient, MockBackend]:
    backend = MockBackend(script or {})
    config = ClientConfig(
        endpoint_url="",
        model_id=model_id,
        backoff_base=0.0,
        cache_dir=(tmp_path / "cache") if cache else None,
        **config_kwargs,
    )
    client = ModelClient(config, backend=backend, image_root=image_root)
    return client, backend


class ScriptBuilder:
    """Accumulate a mock script keyed by the same fingerprints the client uses."""

    def __init__(self, client: ModelClient):
        self.client = client
        self.script: dict = {}

    def on(self, messages, response, params=None) -> str:
        key = self.client.fingerprint(messages, params)
        self.script[key] = response
        return key

    def on_render(self, template: TemplateId, record, response, prior=None, params=None) -> str:
        return self.on(render(template, record, prior=prior), response, params=params)

    def on_probe(self, record, trial_responses: list[str]) -> None:
        """Script each difficulty-probe attempt (one per trial temperature)."""
        messages = render(TemplateId.P_COT, record)
        for trial, response in enumerate(trial_responses):
            self.on(messages, response, params={"temperature": probe_temperature(trial)})

    def install(self) -> None:
        backend = self.client.backend
        assert isinstance(backend, MockBackend)
        backend.script.update(self.script)


def correct_answer_text(record: SampleRecord, steps: int = 2) -> str:
    lines = [f"Step {k}: reasoning part {k}." for k in range(1, steps + 1)]
    if record.answer_type is AnswerType.OPTION_LETTER:
        lines.append(f"The answer is ({record.gold_answer}).")
    else:
        lines.append(f"The answer is {record.gold_answer}.")
    return "\n".join(lines)


def wrong_answer_text(record: SampleRecord, steps: int = 2) -> str:
    lines = [f"Step {k}: reasoning part {k}." for k in range(1, steps + 1)]
    if record.answer_type is AnswerType.OPTION_LETTER:
        wrong = "A" if record.gold_answer != "A" else "B"
        lines.append(f"The answer is ({wrong}).")
    else:
        lines.append("The answer is 987654.")
    return "\n".join(lines)


@pytest.fixture
def image_root(tmp_path: Path) -> Path:
    root = tmp_path / "images"
    make_image(root / "img.png")
    return root
