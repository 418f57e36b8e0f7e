/** Orbit camera state and the pose math matching the render service:
 * quaternions are (w,x,y,z) world-to-camera, camera frame +x right,
 * +y down, +z forward. */

import type { SceneMeta } from "./protocol.js";

export type Vec3 = [number, number, number];
export type Quat = [number, number, number, number];

export interface OrbitState {
  target: Vec3;
  distance: number;
  yaw: number;   // radians around +y
  pitch: number; // radians above the horizon
  minDistance: number;
  maxDistance: number;
}

export interface CameraPose {
  position: Vec3;
  quaternion: Quat;
}

const PITCH_LIMIT = 1.45; // keep away from the poles

function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

export function norm(a: Vec3): number {
  return Math.hypot(a[0], a[1], a[2]);
}

function normalize(a: Vec3): Vec3 {
  const n = norm(a);
  if (n === 0) throw new Error("cannot normalize zero vector");
  return [a[0] / n, a[1] / n, a[2] / n];
}

/** Quaternion from a rotation matrix given as rows (Shepperd's method). */
export function rotToQuat(r: number[][]): Quat {
  const t = r[0][0] + r[1][1] + r[2][2];
  let q: Quat;
  if (t > 0) {
    const s = Math.sqrt(t + 1) * 2;
    q = [0.25 * s, (r[2][1] - r[1][2]) / s, (r[0][2] - r[2][0]) / s, (r[1][0] - r[0][1]) / s];
  } else if (r[0][0] > r[1][1] && r[0][0] > r[2][2]) {
    const s = Math.sqrt(1 + r[0][0] - r[1][1] - r[2][2]) * 2;
    q = [(r[2][1] - r[1][2]) / s, 0.25 * s, (r[0][1] + r[1][0]) / s, (r[0][2] + r[2][0]) / s];
  } else if (r[1][1] > r[2][2]) {
    const s = Math.sqrt(1 + r[1][1] - r[0][0] - r[2][2]) * 2;
    q = [(r[0][2] - r[2][0]) / s, (r[0][1] + r[1][0]) / s, 0.25 * s, (r[1][2] + r[2][1]) / s];
  } else {
    const s = Math.sqrt(1 + r[2][2] - r[0][0] - r[1][1]) * 2;
    q = [(r[1][0] - r[0][1]) / s, (r[0][2] + r[2][0]) / s, (r[1][2] + r[2][1]) / s, 0.25 * s];
  }
  const n = Math.hypot(q[0], q[1], q[2], q[3]);
  return [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
}

export function lookAtQuaternion(eye: Vec3, target: Vec3, up: Vec3 = [0, 1, 0]): Quat {
  const fwd = normalize(sub(target, eye));
  let right = cross(fwd, up);
  if (norm(right) < 1e-12) {
    right = cross(fwd, [1, 0, 0]);
    if (norm(right) < 1e-12) right = cross(fwd, [0, 0, 1]);
  }
  right = normalize(right);
  const down = cross(fwd, right);
  return rotToQuat([right as unknown as number[],
                    down as unknown as number[],
                    fwd as unknown as number[]]);
}

export function eyePosition(state: OrbitState): Vec3 {
  const cp = Math.cos(state.pitch);
  return [
    state.target[0] + state.distance * cp * Math.sin(state.yaw),
    state.target[1] + state.distance * Math.sin(state.pitch),
    state.target[2] + state.distance * cp * Math.cos(state.yaw),
  ];
}

export function cameraPose(state: OrbitState): CameraPose {
  const eye = eyePosition(state);
  return { position: eye, quaternion: lookAtQuaternion(eye, state.target) };
}

export function orbit(state: OrbitState, dYaw: number, dPitch: number): OrbitState {
  return {
    ...state,
    yaw: state.yaw + dYaw,
    pitch: Math.min(PITCH_LIMIT, Math.max(-PITCH_LIMIT, state.pitch + dPitch)),
  };
}

export function dolly(state: OrbitState, factor: number): OrbitState {
  const d = Math.min(state.maxDistance, Math.max(state.minDistance, state.distance * factor));
  return { ...state, distance: d };
}

/** Pan moves the target in the camera's right/down plane, scaled so one
 * unit of input is roughly one viewport at the current distance. */
export function pan(state: OrbitState, dx: number, dy: number): OrbitState {
  const eye = eyePosition(state);
  const fwd = normalize(sub(state.target, eye));
  let right = cross(fwd, [0, 1, 0]);
  if (norm(right) < 1e-12) right = [1, 0, 0];
  right = normalize(right);
  const down = cross(fwd, right);
  const s = state.distance;
  return {
    ...state,
    target: [
      state.target[0] + s * (dx * right[0] + dy * down[0]),
      state.target[1] + s * (dx * right[1] + dy * down[1]),
      state.target[2] + s * (dx * right[2] + dy * down[2]),
    ],
  };
}

/** Default pose framing the scene bounding box from the /meta reply. */
export function defaultOrbit(meta: SceneMeta, fovY: number = Math.PI * 50 / 180): OrbitState {
  const span = sub(meta.bbox_max as Vec3, meta.bbox_min as Vec3);
  const radius = Math.max(0.5 * norm(span), 1e-3);
  const distance = 1.8 * radius / Math.tan(fovY / 2);
  return {
    target: [...meta.centroid] as Vec3,
    distance,
    yaw: 0.6,
    pitch: 0.35,
    minDistance: Math.max(radius * 0.05, 1e-4),
    maxDistance: Math.max(distance * 50, meta.d_max_hat * 2),
  };
}
