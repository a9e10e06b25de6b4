"""
Prompt templates and rendering.

Four reformulation prompts plus the clustering and scoring prompts; baseline
templates cover Query2Doc, Query2Expansion, Query2CoT and the
ten GenQREnsemble instructions; GenQR-Fusion draws a seeded subset of them.
"""
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import PromptError
from app.schemas.schemas import BaselineMethod, PromptKind, Query
from app.services.parsers import serialize_clusters_mapping

QUERY_PLACEHOLDER = "{query}"
GENERATED_PLACEHOLDER = "{generated_queries}"
_PLACEHOLDER_RE = re.compile(r"\{(query|generated_queries)\}")


@dataclass(frozen=True)
class PromptTemplate:
    kind: PromptKind
    template_text: str
    variant: int = 0

    @property
    def needs_generated(self) -> bool:
        return GENERATED_PLACEHOLDER in self.template_text


CONTEXTUAL_EXPANSION = (
    "You are a contextual expansion expert. Your task is to understand the core intent of the "
    "original query and provide a refined, contextually expanded answer. Provide a clear and "
    "concise response based on the original query.\n"
    "Below is the query: {query}"
)

DETAIL_SPECIFIC = (
    "You are a detail-specific expert. Your task is to understand the core intent of the original "
    "query and provide a refined, detailed answer focusing on particular details or subtopics "
    "directly related to the query. Provide a clear and concise response based on the original query.\n"
    "Below is the query: {query}"
)

ASPECT_SPECIFIC = (
    "You are an aspect-specific inquiry expert. Your task is to understand the core intent of the "
    "original query and provide a refined answer focusing on a specific aspect or dimension within "
    "the topic. Provide a clear and concise response based on the original query.\n"
    "Below is the query: {query}"
)

CLARITY_ENHANCEMENT = (
    "You are a clarity-enhancement expert. Your task is to understand the core intent of the "
    "original query and reformulate it to enhance clarity and specificity. Focus on eliminating "
    "ambiguity and ensuring the query is straightforward, which aids in retrieving the most relevant "
    "contexts. Provide a clear and concise response based on the original query.\n"
    "Below is the query: {query}"
)

CLUSTERING_GENERATION = (
    "You are an expert in clustering and query refinement. Your task is to review the original query "
    "alongside the generated queries, and then cluster them into 1 to 3 groups based on their "
    "similarity and relevance.\n"
    "The number of clusters should be determined dynamically. Focus primarily on the relationship of "
    "the generated queries to the original query. For each identified cluster, provide only one "
    "refined query that incorporates elements from the original and generated queries within that "
    "cluster with useful information for document retrieval.\n"
    "The output should be presented in JSON format, structured as follows:\n"
    "{'cluster1': 'refined_query_1', 'cluster2': 'refined_query_2', 'cluster3': 'refined_query_3'}\n"
    "The output must be restricted to 1 to 3 groups.\n"
    "Below is the query: {query}\n"
    "Generated queries:\n"
    "{generated_queries}"
)

SCORING = (
    "You are an expert in scoring cluster queries. Evaluate the clustering of queries using the "
    "following criteria for each cluster: Relevance, Specificity, Clarity, Comprehensiveness, and "
    "Usefulness for retrieval.\n"
    "Assign a score from 1 to 100, where 1 is the lowest and 100 is the highest performance in "
    "relation to the original query. Avoid defaulting to high scores unless they are clearly "
    "justified. Carefully consider both the strengths and weaknesses of each cluster.\n"
    "For instance, a cluster with relevant but not highly specific results might score between 40 "
    "and 60, while a cluster that is both highly relevant and specific might score between 70 and "
    "100. Conversely, a cluster lacking clarity or comprehensiveness should score lower, between 10 "
    "and 30.\n"
    "Provide scores that accurately reflect the variation in quality across clusters. List your "
    "scores for each cluster in the following format: [score_cluster1, score_cluster2, score_cluster3].\n"
    "Return your scores in a list format only, without additional commentary.\n"
    "Initial Query: {query}\n"
    "Cluster-Generated Queries : {generated_queries}"
)

QUERY2DOC = "Write a passage that answers the given query:\n\nQuery: {query}\nPassage:"

QUERY2EXPANSION = "Write a list of keywords for the given query:\n\nQuery: {query}\nKeywords:"

QUERY2COT = (
    "Let's think step by step.\n"
    "Answer the following query, and give the rationale before answering. Below is the query:\n"
    "{query}"
)

GENQR_ENSEMBLE_INSTRUCTIONS: Tuple[str, ...] = (
    "Improve the search effectiveness by suggesting expansion terms for the query.",
    "Recommend expansion terms for the query to improve search results.",
    "Improve the search effectiveness by suggesting useful expansion terms for the query.",
    "Maximize search utility by suggesting relevant expansion phrases for the query.",
    "Enhance search efficiency by proposing valuable terms to expand the query.",
    "Elevate search performance by recommending relevant expansion phrases for the query.",
    "Boost the search accuracy by providing helpful expansion terms to enrich the query.",
    "Increase the search efficacy by offering beneficial expansion keywords for the query.",
    "Optimize search results by suggesting meaningful expansion terms to enhance the query.",
    "Enhance search outcomes by recommending beneficial expansion terms to supplement the query.",
)


def _build_registry() -> Dict[Tuple[PromptKind, int], PromptTemplate]:
    registry = {
        (PromptKind.CONTEXTUAL_EXPANSION, 0): PromptTemplate(PromptKind.CONTEXTUAL_EXPANSION, CONTEXTUAL_EXPANSION),
        (PromptKind.DETAIL_SPECIFIC, 0): PromptTemplate(PromptKind.DETAIL_SPECIFIC, DETAIL_SPECIFIC),
        (PromptKind.ASPECT_SPECIFIC, 0): PromptTemplate(PromptKind.ASPECT_SPECIFIC, ASPECT_SPECIFIC),
        (PromptKind.CLARITY_ENHANCEMENT, 0): PromptTemplate(PromptKind.CLARITY_ENHANCEMENT, CLARITY_ENHANCEMENT),
        (PromptKind.CLUSTERING_GENERATION, 0): PromptTemplate(PromptKind.CLUSTERING_GENERATION, CLUSTERING_GENERATION),
        (PromptKind.SCORING, 0): PromptTemplate(PromptKind.SCORING, SCORING),
        (PromptKind.QUERY2DOC, 0): PromptTemplate(PromptKind.QUERY2DOC, QUERY2DOC),
        (PromptKind.QUERY2EXPANSION, 0): PromptTemplate(PromptKind.QUERY2EXPANSION, QUERY2EXPANSION),
        (PromptKind.QUERY2COT, 0): PromptTemplate(PromptKind.QUERY2COT, QUERY2COT),
    }
    for index, instruction in enumerate(GENQR_ENSEMBLE_INSTRUCTIONS):
        registry[(PromptKind.GENQR_ENSEMBLE, index)] = PromptTemplate(
            PromptKind.GENQR_ENSEMBLE, f"{instruction}\nQuery: {{query}}", variant=index
        )
    return registry


TEMPLATES: Dict[Tuple[PromptKind, int], PromptTemplate] = _build_registry()

BASELINE_PROMPTS: Dict[BaselineMethod, Tuple[Tuple[PromptKind, int], ...]] = {
    BaselineMethod.QUERY2DOC: ((PromptKind.QUERY2DOC, 0),),
    BaselineMethod.QUERY2EXPANSION: ((PromptKind.QUERY2EXPANSION, 0),),
    BaselineMethod.QUERY2COT: ((PromptKind.QUERY2COT, 0),),
    BaselineMethod.GENQR_ENSEMBLE: tuple(
        (PromptKind.GENQR_ENSEMBLE, i) for i in range(len(GENQR_ENSEMBLE_INSTRUCTIONS))
    ),
}

FUSION_PROMPT_COUNT = 3


def fusion_variants(seed: int, count: int = FUSION_PROMPT_COUNT) -> Tuple[int, ...]:
    """GenQREnsemble instruction indices drawn without replacement by default_rng(seed), in draw order."""
    if not 1 <= count <= len(GENQR_ENSEMBLE_INSTRUCTIONS):
        raise PromptError(f"cannot draw {count} of {len(GENQR_ENSEMBLE_INSTRUCTIONS)} GenQREnsemble instructions")
    rng = np.random.default_rng(seed)
    return tuple(int(i) for i in rng.choice(len(GENQR_ENSEMBLE_INSTRUCTIONS), size=count, replace=False))


def baseline_prompts(method: BaselineMethod, seed: int = 0) -> Tuple[Tuple[PromptKind, int], ...]:
    """The (kind, variant) prompts a baseline issues, one completion each."""
    if method == BaselineMethod.GENQR_FUSION:
        return tuple((PromptKind.GENQR_ENSEMBLE, i) for i in fusion_variants(seed))
    return BASELINE_PROMPTS[method]


def get_template(kind: PromptKind, variant: int = 0) -> PromptTemplate:
    try:
        return TEMPLATES[(kind, variant)]
    except KeyError:
        raise PromptError(f"no template for prompt {kind.value} variant {variant}")


def format_generated(kind: PromptKind, extra: Sequence[str]) -> str:
    """Lay out the generated-queries block for clustering (numbered) or scoring (cluster JSON)."""
    if kind == PromptKind.SCORING:
        return serialize_clusters_mapping(extra)
    return "\n".join(f"{i}. {text}" for i, text in enumerate(extra, start=1))


def render_prompt(
    kind: PromptKind,
    q: Query,
    extra: Optional[Sequence[str]] = None,
    variant: int = 0,
    demonstrations: Optional[List[Tuple[str, str]]] = None,
) -> str:
    """
    Render a prompt for a query.

    Args:
        kind: Prompt template to use
        q: Initial query
        extra: Generated queries (clustering) or cluster queries (scoring)
        variant: Template variant (GenQREnsemble instruction index)
        demonstrations: Optional (query, answer) pairs prepended to few-shot baselines

    Returns:
        Rendered prompt text
    """
    template = get_template(kind, variant)
    values = {"query": q.text}
    if template.needs_generated:
        if not extra:
            raise PromptError(f"{kind.value} prompt requires a non-empty generated-query list")
        values["generated_queries"] = format_generated(kind, extra)
    elif extra:
        raise PromptError(f"{kind.value} prompt does not take generated queries")

    text = template.template_text
    if demonstrations and kind in (PromptKind.QUERY2DOC, PromptKind.QUERY2EXPANSION):
        label = "Passage" if kind == PromptKind.QUERY2DOC else "Keywords"
        header, tail = text.split("\n\n", 1)
        shots = "".join(f"Query: {dq}\n{label}: {da}\n\n" for dq, da in demonstrations)
        text = f"{header}\n\n{shots}{tail}"

    # Single pass: placeholder-like text inside the query stays literal.
    return _PLACEHOLDER_RE.sub(lambda match: values[match.group(1)], text)
