"""A local text-generation endpoint that records every prompt it receives."""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class CapturingEndpoint:
    def __init__(self, reply='{"matched": [], "findings": [], "verdict": "Consistent"}'):
        self.reply = reply
        self.requests = []
        endpoint = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                endpoint.requests.append(body)
                reply = endpoint.reply(body["prompt"]) if callable(endpoint.reply) else endpoint.reply
                data = json.dumps({"model": body.get("model"), "response": reply}).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_port}/api/generate"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def prompts(self):
        return [r["prompt"] for r in self.requests]

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
