"""Stdlib HTTP front end for :class:`~sdv_ota.api.ApiRouter`."""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qsl, urlsplit

from .api import ApiRouter

log = logging.getLogger(__name__)

MAX_BODY = 64 * 1024 * 1024


def bearer_token(header: Optional[str]) -> Optional[str]:
    if not header:
        return None
    scheme, _, value = header.partition(" ")
    return value.strip() if scheme.lower() == "bearer" else None


def make_handler(router: ApiRouter) -> type:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "sdv-ota/0.1"

        def _dispatch(self, method: str) -> None:
            url = urlsplit(self.path)
            length = int(self.headers.get("Content-Length") or 0)
            if length > MAX_BODY:
                self.send_error(413)
                return
            body = self.rfile.read(length) if length else None
            response = router.handle(
                method,
                url.path,
                dict(parse_qsl(url.query, keep_blank_values=True)),
                body,
                bearer_token(self.headers.get("Authorization")),
            )
            if response.body is None:
                data, ctype = b"", None
            elif response.is_binary:
                data, ctype = bytes(response.body), "application/octet-stream"
            else:
                data, ctype = json.dumps(response.body, sort_keys=True).encode("utf-8"), "application/json"
            self.send_response(response.status)
            for key, value in response.headers.items():
                self.send_header(key, value)
            if ctype:
                self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            if data:
                self.wfile.write(data)

        def do_GET(self) -> None:
            self._dispatch("GET")

        def do_POST(self) -> None:
            self._dispatch("POST")

        def do_PUT(self) -> None:
            self._dispatch("PUT")

        def log_message(self, fmt: str, *args) -> None:
            log.debug("%s - " + fmt, self.address_string(), *args)

    return Handler


class ServiceServer:
    """Threaded HTTP server; ``start()`` serves from a daemon thread."""

    def __init__(self, router: ApiRouter, host: str = "127.0.0.1", port: int = 0):
        self.httpd = ThreadingHTTPServer((host, port), make_handler(router))
        self.httpd.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ServiceServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, name="sdv-ota-http", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "ServiceServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
