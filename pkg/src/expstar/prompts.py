"""Judge prompt templates, shipped verbatim as used by the curation and
labeling stages. ``[Subject]`` is the only substitution slot; the payload is
appended after an ``Input:`` marker so rule-based mocks can locate it.
"""

from __future__ import annotations

SUBJECT_SLOT = "[Subject]"
PAYLOAD_MARKER = "\n\nInput:\n"

ASR_CORRECTION = "asr-correction"
STEP_SEGMENTATION = "step-segmentation"
ANNOTATION = "principle-safety-annotation"
RELEVANCE = "passage-relevance"

ASR_CORRECTION_TEMPLATE = """\
You are a [Subject] advisor. Please correct any spelling errors, especially homophones used incorrectly, as well as mistakes [Subject] formatting or terminology in the experimental procedure text. Directly update the "text" field with the corrected version.
Note:
-If there are no errors, do not make any changes. Still, return all items in JSON format (including unchanged content).
-Do not include any extra explanation—only return the updated JSON.

Template:
{
    "id": "",
    "startTime": "",
    "endTime": "",
    "text": ""
}"""

STEP_SEGMENTATION_TEMPLATE = """\
You are an experiment instructor for the subject of [Subject]. Based on the ASR JSON text of the experiment audio, please:
1. Generate the "summary" field (experiment summary);
2. Summarize the experiment procedure into the "steps" field, with numbered steps starting from 1;
3. Generate a new field "procedure" (a summary description of each step);
4. Generate the "ASR_id" field, which must strictly follow the order of the ASR fragments. Each step's ASR fragments should consist of a continuous sequence of positive integer numbers (e.g., [2,3,4,5]), without any jumps or regressions (e.g., [2,3,7,5] is not allowed);
5. Each ASR fragment must only appear in one step and cannot be repeated in different steps.
Note:
- Only return the JSON result, no additional explanation is required.
- Ensure that the "ASR_id" only contains continuous positive integer numbers, without any skips or backtracking.

Template:
{
    "summary":"",
    "steps": [
        {
            "step":1,
            "procedure":"",
            "ASR_id":[x, x],
        },
        {
            "step":2,
            "procedure":"",
            "ASR_id":[x, x]
        },
        ......
    ]
}"""

ANNOTATION_TEMPLATE = """\
You are a [Subject] experiment instructor.
Please generate a new field "safety" for each procedure sentence to indicate relevant safety concerns. Avoid redundant warnings for routine or low-risk operations, and do not overemphasize basic or common-sense precautions.
Also, generate a new field "principle" to identify relevant [Subject] equations or core scientific principles involved in each operation.
Return the result in JSON format only (no additional explanation).
Note:
- Not every sentence involves safety issues or scientific principles. If a sentence does not relate to either, do not add new fields—keep the original structure unchanged.
- Do not modify existing fields—only add new ones where applicable.

Template:
{
    "id": "",
    "startTime": "",
    "endTime": "",
    "text": "",
    "safety": "",   # Optional, only if relevant
    "principle": ""   # Optional, only if relevant
}"""

RELEVANCE_TEMPLATE = """\
You are a professional text relevance evaluation assistant. Your task is to evaluate the relevance between a query and a document.
Please provide a score from 1 to 5 based on the degree of relevance between the query and the document, where:
    1: Completely irrelevant
    2: Slightly relevant
    3: Moderately relevant
    4: Highly relevant
    5: Completely relevant
The input will be provided as follows:
Query: The ground truth principle or safety guideline.
Document: The retrieval passage from the knowledge base.
Please return only an integer score between 1 and 5 without any additional explanation."""

_TEMPLATES = {
    ASR_CORRECTION: ASR_CORRECTION_TEMPLATE,
    STEP_SEGMENTATION: STEP_SEGMENTATION_TEMPLATE,
    ANNOTATION: ANNOTATION_TEMPLATE,
    RELEVANCE: RELEVANCE_TEMPLATE,
}


def template_for(template_id: str) -> str:
    return _TEMPLATES[template_id]


def fill_subject(template: str, subject: str) -> str:
    return template.replace(SUBJECT_SLOT, subject)


def build_batch_prompt(template_id: str, subject: str, payload_json: str) -> str:
    """Curation-stage prompt: filled template followed by the JSON payload."""
    return fill_subject(template_for(template_id), subject) + PAYLOAD_MARKER + payload_json


def build_relevance_prompt(query: str, document: str) -> str:
    return f"{RELEVANCE_TEMPLATE}\nQuery: {query}\nDocument: {document}"


def extract_payload(prompt: str) -> str:
    """Recover the JSON payload from a curation-stage prompt (mock-judge helper)."""
    _, sep, payload = prompt.partition(PAYLOAD_MARKER)
    if not sep:
        raise ValueError("prompt carries no payload section")
    return payload


def extract_query_document(prompt: str) -> tuple[str, str]:
    """Recover query/document from a relevance prompt (mock-judge helper).

    The template body mentions "Query:" and "Document:" itself, so split on
    the last occurrences, which belong to the appended input lines.
    """
    head, sep, document = prompt.rpartition("\nDocument: ")
    if not sep:
        raise ValueError("prompt carries no Document section")
    _, sep, query = head.rpartition("\nQuery: ")
    if not sep:
        raise ValueError("prompt carries no Query section")
    return query, document
