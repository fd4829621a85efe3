import assert from "node:assert/strict";
import { test } from "node:test";

import { ThrottleMsg } from "../src/protocol.js";
import { InterventionButton, ThrottleController } from "../src/throttle.js";

function harness(minInterval = 0.02) {
  const sent: ThrottleMsg[] = [];
  let t = 0;
  const ctl = new ThrottleController((m) => sent.push(m), () => t, minInterval);
  return { sent, ctl, advance: (dt: number) => { t += dt; } };
}

test("no input emits nothing", () => {
  const { sent, ctl, advance } = harness();
  for (let i = 0; i < 10; i++) {
    ctl.tick();
    advance(0.02);
  }
  assert.equal(sent.length, 0); // absence means zero to the server
});

test("rate limited to one message per feedback period", () => {
  const { sent, ctl, advance } = harness(0.02);
  ctl.setSlider(0.5);
  assert.equal(sent.length, 1);
  ctl.setSlider(0.6);
  ctl.setSlider(0.7);
  assert.equal(sent.length, 1); // inside the window
  advance(0.02);
  ctl.tick();
  assert.equal(sent.length, 2);
  assert.equal(sent[1].operator_input, 0.7);
});

test("key release returns input to zero", () => {
  const { sent, ctl, advance } = harness(0.02);
  ctl.keyDown("fast");
  assert.equal(sent[0].operator_input, 1);
  advance(0.05);
  ctl.keyUp();
  assert.equal(sent[1].operator_input, 0);
});

test("two-level preset toggles between full and neutral", () => {
  const { sent, ctl, advance } = harness(0.01);
  ctl.togglePreset();
  advance(0.02);
  ctl.togglePreset();
  assert.deepEqual(sent.map((m) => m.operator_input), [1, 0]);
});

test("duplicate values are not resent", () => {
  const { sent, ctl, advance } = harness(0.01);
  ctl.setSlider(0.4);
  advance(0.02);
  ctl.setSlider(0.4);
  ctl.tick();
  assert.equal(sent.length, 1);
});

test("intervention button debounces double clicks", () => {
  let t = 0;
  const fired: number[] = [];
  const button = new InterventionButton((_seq, at) => fired.push(at), () => t, 0.3);
  assert.equal(button.click(), true);
  assert.equal(button.click(), false); // same instant
  t += 0.1;
  assert.equal(button.click(), false); // inside debounce window
  t += 0.3;
  assert.equal(button.click(), true);
  assert.deepEqual(fired, [0, 0.4]);
});
