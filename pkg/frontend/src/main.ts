// Entry point. The service origin comes from ?api=… (default: same origin),
// so the page can be served by any static file server.

import { initApp } from "./ui.js";

const params = new URLSearchParams(window.location.search);
const base = params.get("api") ?? window.location.origin;

initApp(document, base)
  .then((app) => {
    (window as any).__dragedit = app; // handle for the e2e harness
  })
  .catch((err) => {
    const el = document.getElementById("status-line");
    if (el) el.textContent = `cannot reach the editing service at ${base}: ${err.message}`;
  });
