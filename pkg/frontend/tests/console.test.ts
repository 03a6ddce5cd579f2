import { describe, expect, it } from "vitest";

import { ConsoleApp } from "../src/console.js";
import { escapeHtml, renderApp } from "../src/render.js";
import { FakeServer } from "./fake.js";

function draw(app: ConsoleApp): string {
  return renderApp(app.state, app.canSubmit);
}

describe("console state machine", () => {
  it("runs a scripted twelve-episode session to the summary screen", async () => {
    const server = new FakeServer();
    const app = new ConsoleApp(server);
    await app.start("CB-H", "office", 4);

    for (let i = 0; i < 12; i++) {
      expect(app.state.phase).toBe("viewing");
      expect(app.state.episodeIndex).toBe(i);
      const view = app.state.view!;
      // rendered explanation text is exactly the API payload
      expect(draw(app)).toContain(escapeHtml(view.explanation));
      expect(app.canSubmit).toBe(false);
      app.select("cause", view.cause_options[0]!.id);
      expect(app.canSubmit).toBe(false);
      app.select("recovery", view.recovery_options[0]!.id);
      expect(app.canSubmit).toBe(true);
      await app.submit();
      expect(app.state.phase).toBe("feedback");
      await app.acknowledge();
    }

    expect(app.state.phase).toBe("summary");
    expect(server.submissions).toHaveLength(12);
    const expected = await server.getScore();
    expect(app.state.summary).toEqual(expected);
    const html = draw(app);
    expect(html).toContain(expected.fid_f1.toFixed(6));
    expect(html).toContain(expected.sid_f1.toFixed(6));
  });

  it("renders the empty explanation state under the None condition", async () => {
    const server = new FakeServer();
    server.explanationFor = () => "";
    const app = new ConsoleApp(server);
    await app.start("None", "office", 1);
    for (let i = 0; i < 12; i++) {
      expect(app.state.view!.explanation).toBe("");
      expect(draw(app)).toContain("no explanation available");
      app.select("cause", app.state.view!.cause_options[0]!.id);
      app.select("recovery", app.state.view!.recovery_options[0]!.id);
      await app.submit();
      await app.acknowledge();
    }
    expect(app.state.phase).toBe("summary");
  });

  it("shows only the server's verdicts, not a local comparison", async () => {
    const server = new FakeServer();
    server.verdictFor = () => ({ cause: false, recovery: false });
    const app = new ConsoleApp(server);
    await app.start("CB-H", "kitchen", 2);
    // even a "right-looking" pick renders as incorrect when the server says so
    app.select("cause", "object occluded");
    app.select("recovery", "remove-occluder");
    await app.submit();
    let html = draw(app);
    expect(html).toContain("cause: incorrect");
    expect(html).toContain("solution: incorrect");
    expect(html).toContain("failure persists");

    server.verdictFor = () => ({ cause: true, recovery: true });
    await app.acknowledge();
    app.select("cause", "object occluded");
    app.select("recovery", "remove-occluder");
    await app.submit();
    html = draw(app);
    expect(html).toContain("cause: correct");
    expect(html).toContain("plan resumed");
  });

  it("blocks double submission client-side", async () => {
    const server = new FakeServer();
    const app = new ConsoleApp(server);
    await app.start("AB", "kitchen", 3);
    app.select("cause", "object occluded");
    app.select("recovery", "remove-occluder");
    const first = app.submit();
    const second = app.submit(); // in flight, must be ignored
    await Promise.all([first, second]);
    await app.submit(); // feedback phase, must be ignored
    expect(server.submissions).toHaveLength(1);
  });

  it("surfaces fetch failures as a retryable banner", async () => {
    const server = new FakeServer();
    server.failViewOnce = true;
    const app = new ConsoleApp(server);
    await app.start("CB", "kitchen", 5);
    expect(app.state.phase).toBe("error");
    expect(draw(app)).toContain("network down");
    expect(draw(app)).toContain("retry");
    await app.retry();
    expect(app.state.phase).toBe("viewing");
  });

  it("keeps selections inert outside the viewing phase", async () => {
    const server = new FakeServer();
    const app = new ConsoleApp(server);
    await app.start("CB-H", "kitchen", 6);
    app.select("cause", "object occluded");
    app.select("recovery", "remove-occluder");
    await app.submit();
    app.select("cause", "controller error"); // feedback phase: ignored
    expect(app.state.selection.causeId).toBe("object occluded");
  });
});
