import { ApiClient, ApiError, SupersededError } from "./api.js";
import { debounce } from "./debounce.js";
import { drawField } from "./render.js";
import { exportSession, importSession, SessionFormatError } from "./session.js";
import {
  DesignState,
  forceFromAngle,
  initialState,
  isClickableNode,
  isExtrapolatedMagnitude,
  removeLoad,
  restore,
  setFill,
  setLoad,
  setResponse,
  toRequest,
} from "./state.js";
import { FILL_MAX, FILL_MIN, NODE_GRID, TRAINED_MAGNITUDE } from "./types.js";

const DEBOUNCE_MS = 150;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export function start(): void {
  const api = new ApiClient("");
  let state: DesignState = initialState(4);
  let selected: { x: number; y: number } | null = null;

  const banner = el<HTMLDivElement>("banner");
  const grid = el<HTMLDivElement>("node-grid");
  const canvas = el<HTMLCanvasElement>("density-canvas");
  const fillSlider = el<HTMLInputElement>("fill-slider");
  const fillValue = el<HTMLSpanElement>("fill-value");
  const lossBox = el<HTMLDivElement>("losses");
  const editor = el<HTMLDivElement>("force-editor");
  const angleInput = el<HTMLInputElement>("force-angle");
  const magnitudeInput = el<HTMLInputElement>("force-magnitude");
  const extrapolationBadge = el<HTMLSpanElement>("extrapolation-badge");

  fillSlider.min = String(FILL_MIN);
  fillSlider.max = String(FILL_MAX);
  fillSlider.step = "0.01";
  fillSlider.value = String(state.fill);

  const showBanner = (text: string, retry: boolean) => {
    banner.textContent = text;
    banner.classList.toggle("hidden", text === "");
    if (retry) {
      const button = document.createElement("button");
      button.textContent = "Retry";
      button.onclick = () => {
        banner.classList.add("hidden");
        requestPrediction();
      };
      banner.appendChild(button);
    }
  };

  const clearFieldErrors = () => {
    document
      .querySelectorAll(".field-error")
      .forEach((n) => n.classList.remove("field-error"));
  };

  const highlightField = (field?: string) => {
    if (!field) return;
    if (field === "fill") fillSlider.classList.add("field-error");
    else if (field.startsWith("loads")) grid.classList.add("field-error");
  };

  const renderLosses = () => {
    const r = state.lastResponse;
    if (!r) {
      lossBox.textContent = "";
      return;
    }
    lossBox.textContent =
      `compliance ${r.losses.c.toFixed(4)} · fill dev ${r.losses.m.toFixed(4)}` +
      ` · checkerboard ${r.losses.f.toFixed(4)} · uncertainty ${r.losses.p.toFixed(4)}` +
      ` · ${r.inference_ms.toFixed(1)} ms`;
  };

  const renderGrid = () => {
    grid.replaceChildren();
    for (let y = NODE_GRID - 1; y >= 0; y--) {
      for (let x = 0; x < NODE_GRID; x++) {
        const node = document.createElement("button");
        node.className = "node";
        const clickable = isClickableNode(x, y);
        if (!clickable) node.classList.add("clamped");
        node.disabled = !clickable;
        if (state.loads.some((l) => l.node_x === x && l.node_y === y)) {
          node.classList.add("loaded");
        }
        if (selected && selected.x === x && selected.y === y) {
          node.classList.add("selected");
        }
        node.title = clickable ? `node (${x}, ${y})` : "clamped edge";
        node.onclick = () => {
          selected = { x, y };
          const existing = state.loads.find(
            (l) => l.node_x === x && l.node_y === y,
          );
          if (existing) {
            const mag = Math.hypot(existing.fx, existing.fy);
            magnitudeInput.value = mag.toFixed(0);
            angleInput.value = String(
              Math.round(
                ((Math.atan2(existing.fy, existing.fx) * 180) / Math.PI + 360) % 360,
              ),
            );
          } else {
            magnitudeInput.value = String(TRAINED_MAGNITUDE);
            angleInput.value = "270";
          }
          editor.classList.remove("hidden");
          render();
        };
        grid.appendChild(node);
      }
    }
  };

  const render = () => {
    renderGrid();
    fillValue.textContent = state.fill.toFixed(2);
    renderLosses();
    const r = state.lastResponse;
    if (r) drawField(canvas, r.densities, r.d);
    extrapolationBadge.classList.toggle(
      "hidden",
      !isExtrapolatedMagnitude(Number(magnitudeInput.value)),
    );
  };

  const requestPrediction = async () => {
    if (state.loads.length === 0) return;
    clearFieldErrors();
    try {
      const response = await api.predict(toRequest(state));
      state = setResponse(state, response);
      showBanner("", false);
      render();
    } catch (err) {
      if (err instanceof SupersededError) return;
      if (err instanceof ApiError) {
        showBanner(err.message, false);
        highlightField(err.field);
        return;
      }
      showBanner("service unreachable", true);
    }
  };
  const requestDebounced = debounce(requestPrediction, DEBOUNCE_MS);

  fillSlider.oninput = () => {
    state = setFill(state, Number(fillSlider.value));
    fillValue.textContent = state.fill.toFixed(2);
    requestDebounced();
  };

  const applyForce = () => {
    if (!selected) return;
    const magnitude = Number(magnitudeInput.value);
    const { fx, fy } = forceFromAngle(magnitude, Number(angleInput.value));
    state = setLoad(state, { node_x: selected.x, node_y: selected.y, fx, fy });
    render();
    requestDebounced();
  };
  angleInput.onchange = applyForce;
  magnitudeInput.onchange = applyForce;
  el<HTMLButtonElement>("force-apply").onclick = applyForce;
  el<HTMLButtonElement>("force-remove").onclick = () => {
    if (!selected) return;
    state = removeLoad(state, selected.x, selected.y);
    selected = null;
    editor.classList.add("hidden");
    render();
    requestDebounced();
  };

  el<HTMLButtonElement>("session-export").onclick = () => {
    const blob = new Blob([exportSession(toRequest(state))], {
      type: "application/json",
    });
    const a = document.createElement("a");
    a.href = URL.createObjectURL(blob);
    a.download = "design-session.json";
    a.click();
    URL.revokeObjectURL(a.href);
  };

  el<HTMLInputElement>("session-import").onchange = async (event) => {
    const input = event.target as HTMLInputElement;
    const file = input.files?.[0];
    if (!file) return;
    try {
      state = restore(state, importSession(await file.text()));
      fillSlider.value = String(state.fill);
      showBanner("", false);
      render();
      requestDebounced();
    } catch (err) {
      showBanner(
        err instanceof SessionFormatError
          ? `import failed: ${err.message}`
          : "import failed",
        false,
      );
    } finally {
      input.value = "";
    }
  };

  void (async () => {
    if (!(await api.health())) {
      showBanner("service unreachable", true);
    }
  })();
  render();
}

if (typeof document !== "undefined" && document.getElementById("node-grid")) {
  start();
}
