// Built with: wasm-bindgen --target web --out-dir www/pkg <recap_demo.wasm>
import init, { dpoCurve, fitPolicy, scoreCaption } from "./pkg/recap_demo.js";

const $ = (id) => document.getElementById(id);

function show(el, text, isError = false) {
  el.textContent = text;
  el.classList.toggle("err", isError);
}

// Line plot of several series sharing an x axis.
function plot(canvas, xs, series) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 30;
  ctx.clearRect(0, 0, w, h);
  const all = series.flatMap((s) => s.ys);
  let lo = Math.min(...all), hi = Math.max(...all);
  if (hi - lo < 1e-12) { lo -= 0.5; hi += 0.5; }
  const x0 = xs[0], x1 = xs[xs.length - 1];
  const px = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (w - 2 * pad);
  const py = (y) => h - pad - ((y - lo) / (hi - lo)) * (h - 2 * pad);
  ctx.strokeStyle = "#bbb";
  ctx.beginPath();
  ctx.moveTo(pad, py(Math.max(lo, Math.min(hi, 0))));
  ctx.lineTo(w - pad, py(Math.max(lo, Math.min(hi, 0))));
  ctx.stroke();
  ctx.fillStyle = "#666";
  ctx.font = "11px sans-serif";
  ctx.fillText(hi.toPrecision(3), 2, pad - 4);
  ctx.fillText(lo.toPrecision(3), 2, h - pad + 12);
  ctx.fillText(String(+x0.toPrecision(3)), pad, h - 8);
  ctx.fillText(String(+x1.toPrecision(3)), w - pad - 20, h - 8);
  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.lineWidth = 2;
    ctx.beginPath();
    s.ys.forEach((y, i) => (i ? ctx.lineTo(px(xs[i]), py(y)) : ctx.moveTo(px(xs[i]), py(y))));
    ctx.stroke();
  }
}

function updateCurve() {
  const out = $("curve-out");
  try {
    const pts = JSON.parse(dpoCurve(+$("beta").value, +$("span").value, 201));
    plot($("curve-plot"), pts.map((p) => p.margin), [
      { ys: pts.map((p) => p.loss), color: "#1565c0" },
      { ys: pts.map((p) => p.grad_chosen), color: "#c62828" },
    ]);
    const mid = pts[100];
    show(out, `Δ = 0: loss = ${mid.loss.toFixed(6)} (ln 2), gradient = ${mid.grad_chosen.toFixed(4)} (−β/2)`);
  } catch (e) {
    show(out, String(e), true);
  }
}

function runFit() {
  const out = $("fit-out");
  try {
    const fit = JSON.parse(
      fitPolicy(+$("alphabet").value, $("pairs").value, +$("fit-beta").value, +$("steps").value, +$("lr").value),
    );
    const xs = fit.loss_history.map((_, i) => i);
    plot($("fit-plot"), xs, [{ ys: fit.loss_history, color: "#2e7d32" }]);
    const fmt = (ps) => ps.map((p, i) => `${i}: ${p.toFixed(4)}`).join("  ");
    show(
      out,
      `loss ${fit.loss_history[0].toFixed(6)} → ${fit.loss_history.at(-1).toFixed(6)}\n` +
        `initial  ${fmt(fit.initial_probs)}\nfinal    ${fmt(fit.final_probs)}`,
    );
  } catch (e) {
    show(out, String(e), true);
  }
}

function updateChair() {
  const out = $("chair-out");
  try {
    const s = JSON.parse(scoreCaption($("caption").value, $("vocab").value, $("annotated").value));
    show(
      out,
      `mentioned: ${s.mentioned.join(", ") || "(none)"}\n` +
        `CHAIR = ${s.chair.toFixed(4)}   Cover = ${s.cover.toFixed(4)}   Over = ${s.over.toFixed(4)}`,
    );
  } catch (e) {
    show(out, String(e), true);
  }
}

await init();
for (const id of ["beta", "span"]) $(id).addEventListener("input", updateCurve);
for (const id of ["caption", "vocab", "annotated"]) $(id).addEventListener("input", updateChair);
$("fit-run").addEventListener("click", runFit);
updateCurve();
runFit();
updateChair();
