"""Factor proposal, consolidation, annotation, and counterfactual generation.

Two interchangeable backends: an HTTP chat backend that renders prompt
templates and parses the structured responses, and a scripted backend driven
by the synthetic SCM, which answers every request from ground truth and so
makes the whole pipeline deterministic and testable offline.
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass

import requests

from .graph import MixedGraph
from .synth import SCMSpec, render_text_payload, scm_counterfactual
from .types import (
    CHANNEL_OF,
    VERBAL,
    VISUAL,
    FactorSet,
    FactorSpec,
    StructuredDataset,
    normalize_name,
)

TEMPLATE_IDS = ("intra", "inter", "merge", "annotate", "mcr")

# display labels per payload channel
_CHANNEL_TITLE = {"text": "Text", "image": "Image"}
_PAYLOAD_LABEL = {"text": "Review", "image": "Image"}


class OracleParseError(ValueError):
    """A response that does not follow the required output grammar."""


class OracleHTTPError(RuntimeError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


@dataclass(frozen=True)
class CounterfactualCandidate:
    """One hypothetical sample produced under do(intervened_factor := value).

    `values` aligns with the factor set in use when the candidate was
    produced.  `target` may be None, meaning the parent's target carries
    over.  Image instructions equal to "N/A" are identity edits.
    """

    parent_id: str
    intervened_factor: str
    intervened_value: int
    values: tuple[int, ...]
    target: float | None
    text_payloads: dict[str, str]
    image_instructions: dict[str, str]


def counterfactual_id(parent_id: str, factor_name: str, value: int) -> str:
    """Deterministic sample id for an accepted counterfactual."""
    slug = normalize_name(factor_name).replace(" ", "_")
    sign = "+1" if value > 0 else ("-1" if value < 0 else "0")
    return f"{parent_id}~{slug}={sign}"


# -- prompt rendering ---------------------------------------------------------


_PLACEHOLDER = re.compile(r"\{\{(\w+)\}\}")


def _template_text(template_id: str) -> str:
    if template_id not in TEMPLATE_IDS:
        raise ValueError(f"unknown template {template_id!r}, expected one of {TEMPLATE_IDS}")
    from importlib.resources import files

    return files("mmcausal.templates").joinpath(f"prompt_{template_id}.md").read_text("utf-8")


def render_prompt(template_id: str, bindings: dict) -> str:
    """Substitute {{placeholder}} slots verbatim; every slot needs a binding."""
    text = _template_text(template_id)
    needed = set(_PLACEHOLDER.findall(text))
    missing = needed - set(bindings)
    if missing:
        raise KeyError(f"template {template_id!r}: missing bindings for {sorted(missing)}")
    return _PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), text)


def format_factor_list(factors) -> str:
    """Emit factor blocks in the exact grammar parse_factor_list reads."""
    blocks = []
    for f in factors:
        blocks.append(
            f"**{f.name}**\n- 1: {f.criterion_pos}\n- 0: {f.criterion_neu}\n- -1: {f.criterion_neg}"
        )
    return "\n\n".join(blocks)


def _payload_lines(sample, target_label: str) -> list[str]:
    lines = [f"- **{target_label}**: {sample.target}"]
    channels = [c for c in ("text", "image") if c in sample.payloads]
    channels += [c for c in sorted(sample.payloads) if c not in ("text", "image")]
    for chan in channels:
        lines.append(f"- **{_PAYLOAD_LABEL.get(chan, chan.title())}**: {sample.payloads[chan]}")
    return lines


def format_pair_blocks(pairs, samples: dict, target_label: str = "Score") -> str:
    """Contrastive pairs as numbered prompt sections.

    Intra pairs show both samples whole; inter pairs show the text side of
    sample A against the image side of sample B.
    """
    blocks = []
    for o, pair in enumerate(pairs, start=1):
        a = samples[pair.sample_a]
        b = samples[pair.sample_b]
        lines = [f"## Pair {o}"]
        if pair.kind == "intra":
            lines.append(f"### Sample A (ID: {a.id}):")
            lines.extend(_payload_lines(a, target_label))
            lines.append(f"### Sample B (ID: {b.id}):")
            lines.extend(_payload_lines(b, target_label))
        else:
            for side, sample, chan in (("A", a, pair.modality_a), ("B", b, pair.modality_b)):
                lines.append(f"### {_CHANNEL_TITLE.get(chan, chan.title())} from Sample {side} (ID: {sample.id}):")
                lines.append(f"- **{target_label}**: {sample.target}")
                lines.append(f"- **{_PAYLOAD_LABEL.get(chan, chan.title())}**: {sample.payloads[chan]}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def format_sample_blocks(samples, target_label: str = "Score") -> str:
    blocks = []
    for s in samples:
        lines = [f"## Sample {s.id}:"] + _payload_lines(s, target_label)
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def format_annotations(data: StructuredDataset, ids=None) -> str:
    """Annotated rows in the exact grammar parse_annotations reads."""
    names = data.factor_set.names
    blocks = []
    for sid in (ids if ids is not None else data.ids):
        lines = [f"**Sample {sid}**:"]
        for k, name in enumerate(names, start=1):
            lines.append(f"- Factor {k} ({name}): {data.value(sid, name)}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


# -- response parsing ---------------------------------------------------------


_BOLD_LINE = re.compile(r"^\s*\*\*(?P<name>.+?)\*\*\s*:?\s*$")
_CRIT_LINE = re.compile(r"^\s*-\s*(?P<key>-1|0|1)\s*:\s*(?P<text>.*)$")
_SAMPLE_LINE = re.compile(r"^\s*\*\*\s*Sample\s+(?P<sid>.+?)\s*\*\*\s*:?\s*$", re.IGNORECASE)
_FACTOR_NAMED = re.compile(
    r"^\s*-\s*Factor\s+\d+\s*\(\s*(?P<name>.+?)\s*\)\s*:\s*(?P<val>\S+)\s*$", re.IGNORECASE
)
_FACTOR_INDEXED = re.compile(r"^\s*-\s*Factor\s+(?P<k>\d+)\s*:\s*(?P<val>\S+)\s*$", re.IGNORECASE)
_SCENARIO_LINE = re.compile(
    r"^\s*#{1,4}\s*Counterfactual Scenario\s+\d+\s*:\s*(?P<name>.+?)\s*$", re.IGNORECASE
)
_REVIEW_LINE = re.compile(r"^\s*-\s*(?:\*\*)?Review(?:\*\*)?\s*:\s*(?P<text>.*)$", re.IGNORECASE)
_IMAGE_LINE = re.compile(r"^\s*-\s*(?:\*\*)?Image(?:\*\*)?\s*:\s*(?P<text>.*)$", re.IGNORECASE)


def parse_factor_list(text: str) -> list[FactorSpec]:
    """Extract every well-formed factor block; prose bold headers are skipped.

    A bold line counts as a factor header only when criterion lines follow;
    a started block missing any of the three criteria is a hard error.
    """
    lines = text.splitlines()
    out = []
    i = 0
    while i < len(lines):
        m = _BOLD_LINE.match(lines[i])
        if not m or _SAMPLE_LINE.match(lines[i]):
            i += 1
            continue
        name = m.group("name").strip()
        crits: dict[int, str] = {}
        j = i + 1
        while j < len(lines):
            if not lines[j].strip():
                j += 1
                continue
            cm = _CRIT_LINE.match(lines[j])
            if not cm or int(cm.group("key")) in crits:
                break
            crits[int(cm.group("key"))] = cm.group("text").strip()
            j += 1
        if not crits:
            i += 1  # bold prose such as "**Part 1**:", not a factor block
            continue
        missing = sorted({1, 0, -1} - set(crits))
        if missing:
            raise OracleParseError(f"factor block {name!r}: missing criterion lines {missing}")
        empty = [k for k, v in crits.items() if not v]
        if empty:
            raise OracleParseError(f"factor block {name!r}: empty criterion for {sorted(empty)}")
        out.append(FactorSpec(name, "", crits[1], crits[0], crits[-1]))
        i = j
    return out


def _parse_value(token: str, where: str) -> int:
    try:
        value = int(token)
    except ValueError:
        raise OracleParseError(f"{where}: unreadable value {token!r}") from None
    if value not in (-1, 0, 1):
        raise OracleParseError(f"{where}: value {value} outside {{-1, 0, 1}}")
    return value


def parse_annotations(text: str, factors: FactorSet, expected_ids,
                      targets: dict | None = None) -> StructuredDataset:
    """Read "**Sample id**" blocks into a (possibly partial) structured dataset.

    Factor names match case-insensitively with whitespace collapsed; every
    block must cover the full factor set.  `targets` supplies the target
    column (defaults to 0.0, for callers that merge targets afterwards).
    """
    expected = set(expected_ids)
    targets = targets or {}
    data = StructuredDataset(factors)
    names = factors.names

    def flush(sid, values):
        if sid is None:
            return
        row = []
        for name in names:
            if name not in values:
                raise OracleParseError(f"sample {sid}: no value for factor {name!r}")
            row.append(values[name])
        data.add_row(sid, row, targets.get(sid, 0.0))

    sid, values = None, {}
    for line in text.splitlines():
        sm = _SAMPLE_LINE.match(line)
        if sm:
            flush(sid, values)
            sid, values = sm.group("sid"), {}
            if sid not in expected:
                raise OracleParseError(f"unexpected sample id {sid!r}")
            continue
        fm = _FACTOR_NAMED.match(line)
        if fm and sid is not None:
            try:
                canonical = factors.get(fm.group("name")).name
            except KeyError:
                raise OracleParseError(f"sample {sid}: unknown factor {fm.group('name')!r}") from None
            if canonical in values:
                raise OracleParseError(f"sample {sid}: duplicate value for {canonical!r}")
            values[canonical] = _parse_value(fm.group("val"), f"sample {sid}, factor {canonical}")
    flush(sid, values)
    return data


def parse_counterfactuals(text: str, factors: FactorSet) -> list[CounterfactualCandidate]:
    """Read "## Counterfactual Scenario n: factor" sections into candidates.

    Factor lines may be named ("- Factor 1 (Taste): 1") or positional
    ("- Factor 1: 1", indexing the factor set order).  A missing Review line
    is an error; a missing Image line means "N/A"; a target line is optional
    and None is returned so the caller can carry the parent's value over.
    """
    names = factors.names
    target_pattern = re.compile(
        r"^\s*-\s*(?:\*\*)?(?:Score|Target|" + re.escape(factors.target_name) + r")(?:\*\*)?\s*:\s*(?P<val>\S+)\s*$",
        re.IGNORECASE,
    )
    out: list[CounterfactualCandidate] = []
    scenario_factor: str | None = None
    sid: str | None = None
    values: dict[str, int] = {}
    review: str | None = None
    image: str | None = None
    target: float | None = None

    def flush():
        nonlocal sid, values, review, image, target
        if sid is None:
            return
        row = []
        for name in names:
            if name not in values:
                raise OracleParseError(f"counterfactual {sid}: no value for factor {name!r}")
            row.append(values[name])
        if review is None:
            raise OracleParseError(f"counterfactual {sid}: missing Review line")
        out.append(
            CounterfactualCandidate(
                parent_id=sid,
                intervened_factor=scenario_factor,
                intervened_value=values[scenario_factor],
                values=tuple(row),
                target=target,
                text_payloads={"text": review},
                image_instructions={"image": image if image is not None else "N/A"},
            )
        )
        sid, values, review, image, target = None, {}, None, None, None

    for line in text.splitlines():
        sc = _SCENARIO_LINE.match(line)
        if sc:
            flush()
            try:
                scenario_factor = factors.get(sc.group("name")).name
            except KeyError:
                raise OracleParseError(f"scenario names unknown factor {sc.group('name')!r}") from None
            continue
        if scenario_factor is None:
            continue
        sm = _SAMPLE_LINE.match(line)
        if sm:
            flush()
            sid = sm.group("sid")
            continue
        if sid is None:
            continue
        fm = _FACTOR_NAMED.match(line)
        if fm:
            try:
                canonical = factors.get(fm.group("name")).name
            except KeyError:
                raise OracleParseError(f"counterfactual {sid}: unknown factor {fm.group('name')!r}") from None
            values[canonical] = _parse_value(fm.group("val"), f"counterfactual {sid}")
            continue
        im = _FACTOR_INDEXED.match(line)
        if im:
            k = int(im.group("k"))
            if not 1 <= k <= len(names):
                raise OracleParseError(f"counterfactual {sid}: factor index {k} out of range")
            values[names[k - 1]] = _parse_value(im.group("val"), f"counterfactual {sid}")
            continue
        rm = _REVIEW_LINE.match(line)
        if rm:
            review = rm.group("text").strip()
            continue
        iml = _IMAGE_LINE.match(line)
        if iml:
            image = iml.group("text").strip()
            continue
        tm = target_pattern.match(line)
        if tm:
            try:
                target = float(tm.group("val"))
            except ValueError:
                raise OracleParseError(f"counterfactual {sid}: unreadable target {tm.group('val')!r}") from None
    flush()
    return out


# -- image provider -----------------------------------------------------------


class ImageProvider:
    """Applies a textual edit instruction to an image payload."""

    def apply_instruction(self, payload: str, instruction: str) -> str:
        raise NotImplementedError


class RecordingImageProvider(ImageProvider):
    """Default provider: identity transform that logs non-trivial requests."""

    def __init__(self):
        self.instructions: list[tuple[str, str]] = []

    def apply_instruction(self, payload: str, instruction: str) -> str:
        if instruction != "N/A":
            self.instructions.append((payload, instruction))
        return payload


# -- oracle interface -----------------------------------------------------------


def consolidate_factors(candidates, previous: FactorSet) -> FactorSet:
    """Union of previous and candidate factors, deduplicated by normalized name.

    Previous factors keep their position, so structured-dataset column order
    is stable across iterations; the operation is idempotent.
    """
    merged = list(previous.factors)
    seen = {normalize_name(f.name) for f in merged}
    for f in candidates:
        key = normalize_name(f.name)
        if key not in seen:
            merged.append(f)
            seen.add(key)
    return FactorSet(tuple(merged), previous.target_name)


class Oracle:
    """Interface: factor proposal, consolidation, annotation, counterfactuals."""

    def propose_factors_intra(self, pairs, samples, context="", previous=()):
        raise NotImplementedError

    def propose_factors_inter(self, pairs, samples, context="", previous=()):
        raise NotImplementedError

    def consolidate(self, candidates, previous: FactorSet) -> FactorSet:
        raise NotImplementedError

    def annotate(self, samples, factors: FactorSet) -> StructuredDataset:
        raise NotImplementedError

    def counterfactuals(self, samples, structured: StructuredDataset,
                        factor_name: str, graph: MixedGraph | None = None):
        raise NotImplementedError


class ScriptedOracle(Oracle):
    """Ground-truth oracle over a synthetic SCM and its stored noise records.

    Proposals return the generator's true factor specs for the channels
    present in the pairs, annotation replays the mechanisms, and
    counterfactuals call the do-operator, so non-descendants of the
    intervened factor never change.  Counterfactual rows it produced earlier
    are remembered and answered from a registry on later annotate calls.
    """

    def __init__(self, scm: SCMSpec, noise_store):
        self.scm = scm
        self.noise = {r.sample_id: r for r in noise_store} if not isinstance(noise_store, dict) else dict(noise_store)
        self._registry: dict[str, tuple[dict, float]] = {}

    # pure and stateless apart from the registry, which only grows

    def _true_values(self, sample_id: str) -> tuple[dict, float]:
        if sample_id in self.noise:
            return _observe(self.scm, self.noise[sample_id])
        if sample_id in self._registry:
            return self._registry[sample_id]
        raise KeyError(f"sample {sample_id!r} unknown to the noise store")

    def _factors_for_channels(self, channels) -> list[FactorSpec]:
        chans = set(channels)
        out = []
        for f in self.scm.factor_set:
            if CHANNEL_OF[self.scm.modalities[f.name]] in chans:
                out.append(f)
        return out

    def propose_factors_intra(self, pairs, samples=None, context="", previous=()):
        channels = {p.modality_a for p in pairs} | {p.modality_b for p in pairs}
        return self._factors_for_channels(channels)

    def propose_factors_inter(self, pairs, samples=None, context="", previous=()):
        channels = {p.modality_a for p in pairs} | {p.modality_b for p in pairs}
        return self._factors_for_channels(channels)

    def consolidate(self, candidates, previous: FactorSet) -> FactorSet:
        return consolidate_factors(candidates, previous)

    def annotate(self, samples, factors: FactorSet) -> StructuredDataset:
        data = StructuredDataset(factors)
        for s in samples:
            values, _ = self._true_values(s.id)
            lookup = {normalize_name(k): v for k, v in values.items()}
            row = [lookup[normalize_name(name)] for name in factors.names]
            data.add_row(s.id, row, s.target)
        return data

    def counterfactuals(self, samples, structured: StructuredDataset,
                        factor_name: str, graph: MixedGraph | None = None):
        canonical = self.scm.factor_set.get(factor_name).name
        out = []
        for s in samples:
            if s.provenance.kind != "observational":
                continue  # generated counterfactuals have no exogenous record
            observed = structured.value(s.id, canonical)
            if observed == 0:
                continue  # factor unmentioned for this sample: skip, not flip
            flipped = -observed
            values, y = scm_counterfactual(self.scm, self.noise[s.id], canonical, flipped)
            verbal = self.scm.factors_of(VERBAL)
            review = render_text_payload(
                [values[f.name] for f in verbal], verbal, self.scm.text_template
            )
            parent_values, _ = _observe(self.scm, self.noise[s.id])
            changed_visual = [
                f for f in self.scm.factors_of(VISUAL) if values[f.name] != parent_values[f.name]
            ]
            if changed_visual:
                instruction = "; ".join(
                    f"Change {f.name}: {f.criterion_for(values[f.name])}" for f in changed_visual
                )
            else:
                instruction = "N/A"
            self._registry[counterfactual_id(s.id, canonical, flipped)] = (dict(values), y)
            out.append(
                CounterfactualCandidate(
                    parent_id=s.id,
                    intervened_factor=canonical,
                    intervened_value=flipped,
                    values=tuple(values[n] for n in structured.factor_set.names),
                    target=y,
                    text_payloads={"text": review},
                    image_instructions={"image": instruction},
                )
            )
        return out


def _observe(scm: SCMSpec, record) -> tuple[dict, float]:
    """Replay the mechanisms with no intervention."""
    from .synth import _evaluate

    return _evaluate(scm, record)


# -- HTTP backend ---------------------------------------------------------------


def _redact(text: str, secret: str | None) -> str:
    if secret:
        return text.replace(secret, "[REDACTED]")
    return text


def _extract_content(payload: dict):
    try:
        return payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        pass
    content = payload.get("content")
    return content if isinstance(content, str) else None


def chat_complete(endpoint: str, auth: str, model: str, messages, *,
                  max_attempts: int = 3, backoff_base: float = 0.5,
                  timeout: float = 60.0, transcript_path=None, session=None) -> str:
    """POST a chat request, retrying transient failures with exponential backoff.

    Request/response pairs are appended to `transcript_path` as JSON lines
    with the bearer token scrubbed from every logged field.
    """

    def log(status, response_text, error=None):
        if transcript_path is None:
            return
        entry = {
            "endpoint": endpoint,
            "model": model,
            "messages": messages,
            "status": status,
            "response": response_text,
            "error": error,
        }
        with open(transcript_path, "a", encoding="utf-8") as fh:
            fh.write(_redact(json.dumps(entry, sort_keys=True), auth) + "\n")

    sess = session if session is not None else requests
    body = {"model": model, "messages": list(messages)}
    headers = {"Authorization": f"Bearer {auth}"}
    last_error: OracleHTTPError | None = None
    for attempt in range(max_attempts):
        if attempt and backoff_base > 0:
            time.sleep(backoff_base * (2 ** (attempt - 1)))
        try:
            resp = sess.post(endpoint, json=body, headers=headers, timeout=timeout)
        except requests.RequestException as exc:
            last_error = OracleHTTPError(f"request failed: {exc}")
            log(None, None, error=str(exc))
            continue
        if resp.status_code >= 500 or resp.status_code == 429:
            last_error = OracleHTTPError(
                f"transient server error {resp.status_code}", status=resp.status_code
            )
            log(resp.status_code, None, error="transient")
            continue
        if resp.status_code != 200:
            log(resp.status_code, None, error="rejected")
            raise OracleHTTPError(
                f"request rejected with status {resp.status_code}", status=resp.status_code
            )
        try:
            payload = resp.json()
        except ValueError:
            log(resp.status_code, None, error="non-json body")
            raise OracleHTTPError("response body is not JSON", status=resp.status_code) from None
        content = _extract_content(payload)
        if content is None:
            log(resp.status_code, None, error="no assistant content")
            raise OracleHTTPError("response carried no assistant content", status=resp.status_code)
        log(resp.status_code, content)
        return content
    raise last_error if last_error else OracleHTTPError("no attempts made")


_FORMAT_REMINDER = (
    "Your previous response could not be parsed ({error}). "
    "Respond again, following the required output format exactly and emitting nothing else."
)


class HttpOracle(Oracle):
    """Chat-API backend: renders the prompt templates, parses the replies.

    Annotation requests are split into batches to bound context length.  An
    unparseable reply triggers exactly one re-ask carrying a format reminder;
    a second failure raises.
    """

    def __init__(self, endpoint: str, token: str, model: str, *,
                 context: str = "You are an expert analyst.",
                 target_label: str = "Score", batch_size: int = 20,
                 max_attempts: int = 3, backoff_base: float = 0.5,
                 transcript_path=None, session=None):
        if not endpoint or not token:
            raise ValueError("endpoint and token are required")
        self.endpoint = endpoint
        self.token = token
        self.model = model
        self.context = context
        self.target_label = target_label
        self.batch_size = int(batch_size)
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.transcript_path = transcript_path
        self.session = session

    def _ask(self, prompt: str, parse):
        messages = [{"role": "user", "content": prompt}]
        reply = chat_complete(
            self.endpoint, self.token, self.model, messages,
            max_attempts=self.max_attempts, backoff_base=self.backoff_base,
            transcript_path=self.transcript_path, session=self.session,
        )
        try:
            return parse(reply)
        except OracleParseError as exc:
            retry = messages + [
                {"role": "assistant", "content": reply},
                {"role": "user", "content": _FORMAT_REMINDER.format(error=exc)},
            ]
            second = chat_complete(
                self.endpoint, self.token, self.model, retry,
                max_attempts=self.max_attempts, backoff_base=self.backoff_base,
                transcript_path=self.transcript_path, session=self.session,
            )
            return parse(second)

    def _propose(self, template_id, pairs, samples, context, previous):
        previous_names = ", ".join(previous) if previous else "none identified yet"
        prompt = render_prompt(template_id, {
            "pairs": format_pair_blocks(pairs, samples, self.target_label),
            "context": context or self.context,
            "previous_factors": previous_names,
        })
        return self._ask(prompt, parse_factor_list)

    def propose_factors_intra(self, pairs, samples, context="", previous=()):
        return self._propose("intra", pairs, samples, context, previous)

    def propose_factors_inter(self, pairs, samples, context="", previous=()):
        return self._propose("inter", pairs, samples, context, previous)

    def consolidate(self, candidates, previous: FactorSet) -> FactorSet:
        if not candidates:
            return consolidate_factors([], previous)
        prompt = render_prompt("merge", {
            "candidates": format_factor_list(list(previous.factors) + list(candidates)),
        })
        merged = self._ask(prompt, parse_factor_list)
        # previous factors survive merging even if the reply drops them
        return consolidate_factors(merged, previous)

    def annotate(self, samples, factors: FactorSet) -> StructuredDataset:
        samples = list(samples)
        data = StructuredDataset(factors)
        for start in range(0, len(samples), self.batch_size):
            batch = samples[start:start + self.batch_size]
            ids = [s.id for s in batch]
            targets = {s.id: s.target for s in batch}
            prompt = render_prompt("annotate", {
                "factors": format_factor_list(factors),
                "samples": format_sample_blocks(batch, self.target_label),
            })
            part = self._ask(
                prompt,
                lambda text: parse_annotations(text, factors, ids, targets=targets),
            )
            missing = [sid for sid in ids if sid not in part]
            if missing:
                raise OracleParseError(f"annotation batch dropped samples {missing}")
            for sid in part.ids:
                data.add_row(sid, part.rows[sid], part.targets[sid])
        return data

    def counterfactuals(self, samples, structured: StructuredDataset,
                        factor_name: str, graph: MixedGraph | None = None):
        samples = list(samples)
        canonical = structured.factor_set.get(factor_name).name
        uncertain = [f"- {canonical}: causal direction undecided"]
        if graph is not None:
            edges = [f"{a} o-o {b}" for a, b in graph.ambiguous_edges() if canonical in (a, b)]
            if edges:
                uncertain.append(f"  ambiguous edges: {', '.join(edges)}")
        prompt = render_prompt("mcr", {
            "samples": format_sample_blocks(samples, self.target_label),
            "factors": format_factor_list(structured.factor_set),
            "annotations": format_annotations(structured, [s.id for s in samples]),
            "uncertain": "\n".join(uncertain),
        })
        candidates = self._ask(
            prompt, lambda text: parse_counterfactuals(text, structured.factor_set)
        )
        by_id = {s.id: s for s in samples}
        kept = []
        for cand in candidates:
            if normalize_name(cand.intervened_factor) != normalize_name(canonical):
                continue  # reply may volunteer extra scenarios; keep the asked one
            if cand.parent_id not in by_id:
                raise OracleParseError(f"counterfactual names unknown sample {cand.parent_id!r}")
            if cand.target is None:
                cand = CounterfactualCandidate(
                    parent_id=cand.parent_id,
                    intervened_factor=cand.intervened_factor,
                    intervened_value=cand.intervened_value,
                    values=cand.values,
                    target=by_id[cand.parent_id].target,
                    text_payloads=cand.text_payloads,
                    image_instructions=cand.image_instructions,
                )
            kept.append(cand)
        return kept
