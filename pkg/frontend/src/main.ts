// Bootstrap: read the API base from the ?api= query parameter (the editor is
// plain static files, so the service usually lives on another origin).

import { ApiClient } from "./api.js";
import { EditorApp } from "./ui.js";

const DEFAULT_API = "http://localhost:8000";

async function boot(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const base = params.get("api") ?? DEFAULT_API;
  const api = new ApiClient(base);
  const status = document.getElementById("status")!;
  try {
    const health = await api.health();
    const [mh, mw] = health.model.map_size;
    status.textContent = `connected to ${base} — ${health.samples} samples, ` +
      `${health.model.num_classes} classes, ${mh}x${mw} attention maps`;
  } catch (err) {
    status.textContent = `cannot reach ${base}: ` +
      `${err instanceof Error ? err.message : err}. ` +
      "Start the service and reload, or pass ?api=http://host:port";
    return;
  }
  await new EditorApp(api).start();
}

void boot();
