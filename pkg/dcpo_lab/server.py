"""MCP tool server exposing the lab."""

from __future__ import annotations

import asyncio
import json
import time
import uuid
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from mcp.server import Server
from mcp.server.stdio import stdio_server
from mcp.types import TextContent, Tool

from . import __version__
from .calibration import bin_records, records_from_arrays, summarize
from .harness import initial_policy, preset_names, run_preset
from .protocol import (
    EXPERIMENT_TOOL_SCHEMA,
    RECORDS_TOOL_SCHEMA,
    SUITE_SCHEMA,
    TRAIN_TOOL_SCHEMA,
    Algorithm,
    RunConfig,
    RunKind,
    RunRecord,
    RunStatus,
    SuiteSpec,
)
from .storage import RunStorage, save_policy, write_json, write_train_log
from .taskenv import suite_from_spec
from .theory import certificates_passed, run_certificates
from .trainer import evaluate_policy, train

RUN_ID_SCHEMA = {
    "type": "object",
    "properties": {"run_id": {"type": "string"}},
    "required": ["run_id"],
}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class LabServer:
    def __init__(self, storage: RunStorage, name: str = "dcpo-lab", version: str = __version__) -> None:
        self.name = name
        self.version = version
        self.storage = storage
        self.server = Server(name)
        self._runs: Dict[str, RunRecord] = {}
        self._jobs: Dict[str, asyncio.Task] = {}
        self._started_at = time.time()

        self._load_runs()
        self._register_tools()

    def _load_runs(self) -> None:
        for record in self.storage.records(RunStatus.PENDING, RunStatus.RUNNING):
            record.status = RunStatus.FAILED
            record.completed_at = _now()
            record.error = "Server restarted while run was in progress."
            self.storage.write_run(record)
        self._runs = self.storage.load_all()

    def _register_tools(self) -> None:
        @self.server.list_tools()
        async def list_tools() -> List[Tool]:
            return [
                Tool(
                    name="lab_info",
                    description="Return lab version, algorithms and experiment presets.",
                    inputSchema={"type": "object", "properties": {}},
                ),
                Tool(
                    name="generate_suite",
                    description="Generate a synthetic task suite and return it as JSON.",
                    inputSchema=SUITE_SCHEMA,
                ),
                Tool(
                    name="train",
                    description="Start training a policy (grpo, dcpo or coupled); run_result returns its evaluation.",
                    inputSchema=TRAIN_TOOL_SCHEMA,
                ),
                Tool(
                    name="metrics",
                    description="ECE, PCE, AUROC and Brier score of confidence/correctness records.",
                    inputSchema=RECORDS_TOOL_SCHEMA,
                ),
                Tool(
                    name="reliability",
                    description="Reliability-diagram bins of confidence/correctness records.",
                    inputSchema=RECORDS_TOOL_SCHEMA,
                ),
                Tool(
                    name="theory",
                    description="Start the theory certificates in the background.",
                    inputSchema={
                        "type": "object",
                        "properties": {
                            "seed": {"type": "integer", "minimum": 0},
                            "include_training": {"type": "boolean"},
                        },
                    },
                ),
                Tool(
                    name="experiment",
                    description="Start an experiment preset writing into an output directory.",
                    inputSchema=EXPERIMENT_TOOL_SCHEMA,
                ),
                Tool(
                    name="run_status",
                    description="Get status of a run.",
                    inputSchema=RUN_ID_SCHEMA,
                ),
                Tool(
                    name="run_result",
                    description="Get result of a finished run.",
                    inputSchema=RUN_ID_SCHEMA,
                ),
            ]

        @self.server.call_tool()
        async def call_tool(name: str, arguments: Dict[str, Any]) -> List[TextContent]:
            return [TextContent(type="text", text=json.dumps(await self.dispatch(name, arguments), indent=2))]

    async def dispatch(self, name: str, arguments: Optional[Dict[str, Any]]) -> Dict[str, Any]:
        arguments = arguments or {}
        try:
            if name == "lab_info":
                return self.lab_info()
            if name == "generate_suite":
                return self.generate_suite(arguments)
            if name == "train":
                return await self.train(arguments)
            if name == "metrics":
                return self.metrics(arguments)
            if name == "reliability":
                return self.reliability(arguments)
            if name == "theory":
                return await self.theory(arguments)
            if name == "experiment":
                return await self.experiment(arguments)
            if name == "run_status":
                return self.run_status(arguments.get("run_id", ""))
            if name == "run_result":
                return self.run_result(arguments.get("run_id", ""))
            return {"error": f"Unknown tool: {name}"}
        except Exception as e:
            return {"error": str(e)}

    def lab_info(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "version": self.version,
            "algorithms": [a.value for a in Algorithm],
            "presets": preset_names(),
            "runs": len(self._runs),
            "uptime_seconds": int(time.time() - self._started_at),
        }

    def generate_suite(self, args: Dict[str, Any]) -> Dict[str, Any]:
        return suite_from_spec(SuiteSpec.from_dict(args)).to_dict()

    def metrics(self, args: Dict[str, Any]) -> Dict[str, Any]:
        records = records_from_arrays(args.get("confidence", []), args.get("correct", []))
        return summarize(records, int(args.get("bins", 10)))

    def reliability(self, args: Dict[str, Any]) -> Dict[str, Any]:
        records = records_from_arrays(args.get("confidence", []), args.get("correct", []))
        return {"bins": bin_records(records, int(args.get("bins", 10))).to_rows()}

    async def train(self, args: Dict[str, Any]) -> Dict[str, Any]:
        args = dict(args)
        output_dir = args.pop("output_dir", None)
        config = RunConfig.from_dict(args)

        def job() -> Dict[str, Any]:
            suite = suite_from_spec(config.suite)
            initial = initial_policy(suite, config.initial)
            params, log = train(config.trainer, suite, initial)
            evaluation = evaluate_policy(params, suite, config.trainer)
            if output_dir:
                out = Path(output_dir)
                write_train_log(out / "train_log.csv", log)
                save_policy(out / "policy.json", params)
                write_json(out / "metrics.json", evaluation.to_dict())
            return {
                "evaluation": evaluation.to_dict(),
                "last_log_row": log.rows[-1].to_dict() if log.rows else None,
                "logged_steps": len(log),
            }

        return await self._submit(RunKind.TRAIN, config.to_dict(), job)

    async def theory(self, args: Dict[str, Any]) -> Dict[str, Any]:
        seed = int(args.get("seed", 0))
        include_training = bool(args.get("include_training", False))

        def job() -> Dict[str, Any]:
            results = run_certificates(seed=seed, include_training=include_training)
            return {
                "passed": certificates_passed(results),
                "checks": {key: result.to_dict() for key, result in results.items()},
            }

        return await self._submit(RunKind.THEORY, {"seed": seed, "include_training": include_training}, job)

    async def experiment(self, args: Dict[str, Any]) -> Dict[str, Any]:
        preset = args.get("preset", "")
        output_dir = args.get("output_dir", "")
        if not output_dir:
            return {"error": "output_dir is required"}
        base_seed = int(args.get("base_seed", 0))

        def job() -> Dict[str, Any]:
            document, ok = run_preset(preset, output_dir, base_seed)
            return {"passed": ok, "output_dir": output_dir, "summary": document}

        request = {"preset": preset, "output_dir": output_dir, "base_seed": base_seed}
        return await self._submit(RunKind.EXPERIMENT, request, job)

    async def _submit(
        self, kind: RunKind, request: Dict[str, Any], job: Callable[[], Dict[str, Any]]
    ) -> Dict[str, Any]:
        """Record the run as pending and start it in the background; poll run_status for progress."""
        record = RunRecord(run_id=str(uuid.uuid4()), kind=kind, request=request, created_at=_now())
        self._runs[record.run_id] = record
        self.storage.write_run(record)
        self._jobs[record.run_id] = asyncio.create_task(self._run_job(record, job))
        return {"run_id": record.run_id, "status": record.status.value}

    async def _run_job(self, record: RunRecord, job: Callable[[], Dict[str, Any]]) -> None:
        record.status = RunStatus.RUNNING
        record.started_at = _now()
        self.storage.write_run(record)
        try:
            record.result = await asyncio.to_thread(job)
            record.status = RunStatus.COMPLETED
        except asyncio.CancelledError:
            record.status = RunStatus.FAILED
            record.error = "cancelled"
            raise
        except Exception as e:
            record.status = RunStatus.FAILED
            record.error = str(e)
        finally:
            record.completed_at = _now()
            self.storage.write_run(record)
            self._jobs.pop(record.run_id, None)

    def run_status(self, run_id: str) -> Dict[str, Any]:
        record = self._runs.get(run_id) or self.storage.load_run(run_id)
        if not record:
            return {"run_id": run_id, "status": "unknown"}
        return {
            "run_id": run_id,
            "kind": record.kind.value,
            "status": record.status.value,
            "created_at": record.created_at,
            "started_at": record.started_at,
            "completed_at": record.completed_at,
            "error": record.error,
        }

    def run_result(self, run_id: str) -> Dict[str, Any]:
        record = self._runs.get(run_id) or self.storage.load_run(run_id)
        if not record:
            return {"run_id": run_id, "status": "unknown"}
        if record.status not in (RunStatus.COMPLETED, RunStatus.FAILED):
            return {"run_id": run_id, "status": record.status.value}
        return {"run_id": run_id, "status": record.status.value, "result": record.result, "error": record.error}

    async def run(self) -> None:
        async with stdio_server() as (read_stream, write_stream):
            await self.server.run(read_stream, write_stream, self.server.create_initialization_options())
