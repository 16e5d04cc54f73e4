"""Scripted chat-completions HTTP server for hermetic end-to-end tests.

    voiplace-mock-llm script.json --port 8089 [--log requests.jsonl]

Each POST to ``/v1/chat/completions`` is answered with the next scripted
reply; see :class:`voiplace.agent.llm.ResponseScript` for the script format.
"""

from __future__ import annotations

import argparse
import json
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional, Tuple

from voiplace.agent.llm import ResponseScript


class _Handler(BaseHTTPRequestHandler):
    server: "MockServer"

    def log_message(self, fmt, *args):  # keep test output quiet
        pass

    def do_POST(self):
        if self.path.rstrip("/") != "/v1/chat/completions":
            self._send(404, {"error": "not found"})
            return
        length = int(self.headers.get("Content-Length", 0))
        try:
            body = json.loads(self.rfile.read(length) or b"{}")
        except ValueError:
            self._send(400, {"error": "invalid json"})
            return
        item = self.server.next_item(body, self.headers.get("Authorization"))
        if isinstance(item, dict) and "status" in item:
            self._send(int(item["status"]), {"error": "scripted failure"})
            return
        content = item.get("content", "") if isinstance(item, dict) else item
        self._send(200, {
            "id": f"mock-{self.server.count}",
            "object": "chat.completion",
            "model": body.get("model", "mock"),
            "choices": [{"index": 0, "message": {"role": "assistant", "content": content},
                         "finish_reason": "stop"}],
        })

    def _send(self, status, obj):
        data = json.dumps(obj).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


class MockServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, script: ResponseScript, address=("127.0.0.1", 0), log_path: Optional[str] = None):
        super().__init__(address, _Handler)
        self.script = script
        self.count = 0
        self.requests = []
        self.log_path = log_path
        self._lock = threading.Lock()

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def next_item(self, body, auth):
        with self._lock:
            item = self.script.item(self.count)
            self.count += 1
            self.requests.append({"body": body, "authorization": auth})
            if self.log_path:
                with open(self.log_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(body) + "\n")
        return item


def serve_in_thread(script, log_path: Optional[str] = None) -> Tuple[MockServer, threading.Thread]:
    server = MockServer(ResponseScript.load(script) if not isinstance(script, ResponseScript) else script,
                        log_path=log_path)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="voiplace-mock-llm", description=__doc__.splitlines()[0])
    ap.add_argument("script", help="JSON response script")
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=8089)
    ap.add_argument("--log", help="append received request bodies (JSON lines)")
    args = ap.parse_args(argv)
    server = MockServer(ResponseScript.load(args.script), (args.host, args.port), args.log)
    print(server.url, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
