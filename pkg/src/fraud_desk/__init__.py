"""Automated credit-card fraud investigation engine.

A plan/gather/analyze agent loop over a transaction corpus, driven by a
pluggable language-model backend, producing structured evidence reports and
fraud verdicts, plus the evaluation suite used to judge it.
"""

from .agents import (
    FilteredReport,
    UnfilteredReport,
    Verdict,
    classify_verdict,
    describe_image,
    filter_report,
    generate_unfiltered_report,
    parse_report,
    render_report,
)
from .datastore import (
    AggregateSpec,
    Dataset,
    DatasetSchema,
    Predicate,
    QueryFilter,
    TransactionRecord,
    aggregate_stats,
    ingest_and_preprocess,
    load_schema,
    lookup_transaction,
    query_transactions,
)
from .gateway import (
    BackendConfig,
    ChatMessage,
    CompletionRequest,
    CompletionResponse,
    HttpBackend,
    RecordingBackend,
    ScriptedBackend,
    ToolCall,
    Usage,
    count_tokens,
    prompt_digest,
    record_transcript,
)
from .orchestrator import (
    Alert,
    Investigation,
    InvestigationStep,
    assemble_initial_prompt,
    assemble_step_prompt,
    load_investigation,
    parse_step,
    run_investigation,
    save_investigation,
)
from .tools import ChartSpec, ToolContext, ToolResult, dispatch_tool, haversine_km

__version__ = "0.1.0"
