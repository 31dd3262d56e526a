"""Dataset loading, end-to-end runs, judging, audits and reports."""

from structmem.harness.agreement import AgreementReport, agreement_stats, cohen_kappa, fleiss_kappa
from structmem.harness.audit import audit_consolidation_fidelity, audit_extraction_fidelity
from structmem.harness.dataset import Conversation, QAItem, Session, Turn, load_dataset
from structmem.harness.report import RunReport, combine_reports, emit_report, render_table
from structmem.harness.runner import BuildResult, JudgeVerdict, parse_verdict, run_build, run_eval

__all__ = [
    "AgreementReport", "BuildResult", "Conversation", "JudgeVerdict", "QAItem", "RunReport",
    "Session", "Turn", "agreement_stats", "audit_consolidation_fidelity", "audit_extraction_fidelity",
    "cohen_kappa", "combine_reports", "emit_report", "fleiss_kappa", "load_dataset", "parse_verdict",
    "render_table", "run_build", "run_eval",
]
