"""
审计日志系统 - 记录生命周期变更、规则隔离、工单与错误
每条记录带模拟时间戳 t_ms，同一场景重复运行时日志逐字节一致
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

logger = logging.getLogger(__name__)


class AuditLogger:
    """审计日志记录器 - 以 JSONL 追加写入"""

    def __init__(
        self,
        log_dir: str = "logs",
        clock: Optional[Callable[[], int]] = None,
    ):
        """
        Args:
            log_dir: 日志目录
            clock: 返回当前模拟时间（毫秒）的函数，缺省时记为 0
        """
        self.log_dir = Path(log_dir)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.clock = clock or (lambda: 0)
        self._logger = logging.getLogger(f"{__name__}.AuditLogger")

    def _get_log_file_path(self, log_type: str) -> Path:
        return self.log_dir / f"{log_type}.jsonl"

    def _write_log(self, log_type: str, data: Dict[str, Any]) -> None:
        """写入日志到文件"""
        try:
            log_entry = {"t_ms": int(self.clock()), **data}
            with open(self._get_log_file_path(log_type), "a", encoding="utf-8") as f:
                f.write(json.dumps(log_entry, ensure_ascii=False, sort_keys=True) + "\n")
        except OSError as e:
            self._logger.error("Failed to write audit log: %s", e)

    def log_system_event(
        self,
        event_type: str,
        description: str,
        metadata: Optional[Dict[str, Any]] = None,
    ) -> None:
        """记录控制面动作：事故开立、隔离、工单、规则提交等；metadata 原样写入"""
        data: Dict[str, Any] = {
            "type": "system_event",
            "event_type": event_type,
            "description": description,
        }
        if metadata:
            data["metadata"] = metadata
        self._write_log("events", data)

    def log_transition(self, record: Dict[str, Any]) -> None:
        self._write_log("lifecycle", {"type": "transition", **record})

    def log_rule_audit(self, rule_id: str, action: str, reason: str = "") -> None:
        self._write_log(
            "kb_audit",
            {"type": "rule_audit", "rule_id": rule_id, "action": action, "reason": reason},
        )

    def log_error(
        self,
        error_type: str,
        error_message: str,
        context: Optional[Dict[str, Any]] = None,
        traceback: Optional[str] = None,
    ) -> None:
        """记录 GuardianError 及处置失败；context 一般带 node_id 或子命令名，traceback 截断到 5000 字符"""
        data: Dict[str, Any] = {
            "type": "error",
            "error_type": error_type,
            "error_message": error_message,
        }
        if context:
            data["context"] = context
        if traceback:
            data["traceback"] = traceback[:5000]  # 限制长度
        self._write_log("errors", data)

    def query_logs(
        self,
        log_type: str,
        t0: Optional[int] = None,
        t1: Optional[int] = None,
        limit: int = 100,
    ) -> List[Dict[str, Any]]:
        """
        查询日志（用于调试），按 t_ms 升序返回 [t0, t1) 内的记录
        """
        log_file = self._get_log_file_path(log_type)
        if not log_file.exists():
            return []
        results: List[Dict[str, Any]] = []
        with open(log_file, "r", encoding="utf-8") as f:
            for line in f:
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError:
                    continue
                t = entry.get("t_ms", 0)
                if t0 is not None and t < t0:
                    continue
                if t1 is not None and t >= t1:
                    continue
                results.append(entry)
        results.sort(key=lambda x: x.get("t_ms", 0))
        return results[:limit]
