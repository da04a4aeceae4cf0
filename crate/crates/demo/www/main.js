import init, { noise_preview, alpha_bar, memory_grid, strategy_costs } from "./pkg/streamdiff_demo.js";

const $ = (id) => document.getElementById(id);

function paint(canvas, rgba, w, h) {
  canvas.width = w;
  canvas.height = h;
  const ctx = canvas.getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), w, h), 0, 0);
}

function drawNoise() {
  const seed = BigInt($("seed").value || 0);
  const frame = Number($("frame").value);
  const t = Number($("t").value);
  $("frame-out").textContent = frame;
  $("t-out").textContent = t === 0 ? "0 (clean)" : `${t}, alpha_bar = ${alpha_bar(t).toExponential(2)}`;
  paint($("noise"), noise_preview(seed, frame, t), 64, 32);
}

function drawMemory() {
  const g = Number($("grid").value);
  const scale = Number($("scale").value);
  $("grid-out").textContent = `${g} x ${g}`;
  $("scale-out").textContent = scale;
  paint($("memory"), memory_grid(g, g, 1n, scale), g, g);
}

function runCosts() {
  const frames = Number($("frames").value);
  const grid = Number($("cgrid").value);
  const report = JSON.parse(strategy_costs(frames, grid));
  const table = $("costs");
  table.innerHTML = "<tr><th>strategy</th><th>FLOPs frame 1</th><th>FLOPs last</th><th>state frame 1</th><th>state last</th></tr>";
  for (const row of report.rows) {
    const tr = document.createElement("tr");
    const last = row.flops.length - 1;
    for (const v of [row.strategy, row.flops[0], row.flops[last], row.state[0], row.state[last]]) {
      const td = document.createElement("td");
      td.textContent = typeof v === "number" ? v.toLocaleString() : v;
      tr.appendChild(td);
    }
    table.appendChild(tr);
  }
}

async function main() {
  await init();
  $("status").textContent = "";
  for (const id of ["seed", "frame", "t"]) $(id).addEventListener("input", drawNoise);
  for (const id of ["grid", "scale"]) $(id).addEventListener("input", drawMemory);
  $("run").addEventListener("click", runCosts);
  drawNoise();
  drawMemory();
}

main().catch((e) => {
  $("status").textContent = `Failed to start: ${e}`;
});
