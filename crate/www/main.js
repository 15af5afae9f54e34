import init, { Demo } from "./pkg/eqbev_wasm.js";

const $ = (id) => document.getElementById(id);
let demo = null;

function model() {
  return document.querySelector('input[name="model"]:checked').value === "eq";
}

function drawScene(angle) {
  const view = JSON.parse(demo.scene_json(angle));
  const cv = $("scene");
  const ctx = cv.getContext("2d");
  const k = cv.width / (2 * view.half_extent);
  const px = (x, y) => [(x + view.half_extent) * k, (view.half_extent - y) * k];
  ctx.clearRect(0, 0, cv.width, cv.height);
  for (const [x, y, i] of view.points) {
    const g = Math.round(60 + 195 * Math.min(1, Math.max(0, i)));
    ctx.fillStyle = `rgb(${g},${g},${g})`;
    const [u, v] = px(x, y);
    ctx.fillRect(u - 1, v - 1, 2, 2);
  }
  ctx.strokeStyle = "#3ccf4e";
  ctx.lineWidth = 1.5;
  for (const b of view.boxes) {
    ctx.beginPath();
    b.corners.forEach(([x, y], j) => (j ? ctx.lineTo(...px(x, y)) : ctx.moveTo(...px(x, y))));
    ctx.closePath();
    ctx.stroke();
    const [u0, v0] = px(b.center[0], b.center[1]);
    const front = px((b.corners[0][0] + b.corners[3][0]) / 2, (b.corners[0][1] + b.corners[3][1]) / 2);
    ctx.beginPath();
    ctx.moveTo(u0, v0);
    ctx.lineTo(...front);
    ctx.stroke();
  }
}

function drawHeat(angle) {
  const n = demo.grid_cells;
  const values = demo.heatmap(angle, model());
  const img = new ImageData(n, n);
  values.forEach((v, i) => {
    img.data[4 * i] = Math.round(255 * v);
    img.data[4 * i + 1] = Math.round(120 * v);
    img.data[4 * i + 2] = Math.round(255 * (1 - v) * 0.4);
    img.data[4 * i + 3] = 255;
  });
  const off = new OffscreenCanvas(n, n);
  off.getContext("2d").putImageData(img, 0, 0);
  const ctx = $("heat").getContext("2d");
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(off, 0, 0, $("heat").width, $("heat").height);
}

function redraw() {
  const angle = Number($("angle").value);
  $("angle-val").textContent = angle;
  drawScene(angle);
  drawHeat(angle);
}

function runAudit() {
  const rows = JSON.parse(demo.residuals_json(model()));
  const layers = [...new Set(rows.map((r) => r.layer))];
  let html = "<table><tr><th>layer</th><th>r=0</th><th>r=1</th><th>r=2</th><th>r=3</th></tr>";
  for (const layer of layers) {
    html += `<tr><td>${layer}</td>`;
    for (let r = 0; r < 4; r++) {
      const v = rows.find((x) => x.layer === layer && x.r === r).residual;
      html += `<td class="${v <= 1e-5 ? "good" : "bad"}">${v.toExponential(2)}</td>`;
    }
    html += "</tr>";
  }
  $("table").innerHTML = html + "</table>";
}

function rebuild() {
  demo = new Demo(Number($("seed").value) >>> 0, 1);
  redraw();
}

await init();
rebuild();
$("seed").addEventListener("change", rebuild);
$("angle").addEventListener("input", redraw);
document.querySelectorAll('input[name="model"]').forEach((el) => el.addEventListener("change", redraw));
$("audit").addEventListener("click", runAudit);
