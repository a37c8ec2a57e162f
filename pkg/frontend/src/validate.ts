// Client-side check of a document against the schema published at
// GET /schema/edit-spec, so form mistakes surface inline before a request
// is made. Covers the subset of JSON Schema the published schema actually
// uses; the server remains the authority and its 422 violations render
// through the same {pointer, message} shape.

import type { Violation } from "./types.js";

type Schema = Record<string, any>;

function typeOf(value: unknown): string {
  if (value === null) return "null";
  if (Array.isArray(value)) return "array";
  return typeof value; // "string" | "number" | "boolean" | "object"
}

function matchesType(value: unknown, t: string): boolean {
  if (t === "integer") return typeof value === "number" && Number.isInteger(value);
  if (t === "number") return typeof value === "number";
  return typeOf(value) === t;
}

function checkNode(value: unknown, schema: Schema, pointer: string, out: Violation[]): void {
  if (schema.type !== undefined) {
    const types: string[] = Array.isArray(schema.type) ? schema.type : [schema.type];
    if (!types.some((t) => matchesType(value, t))) {
      out.push({ pointer, message: `expected ${types.join(" or ")}, got ${typeOf(value)}` });
      return; // further checks assume the right shape
    }
  }
  if (schema.const !== undefined && value !== schema.const) {
    out.push({ pointer, message: `must equal ${JSON.stringify(schema.const)}` });
  }
  if (schema.enum !== undefined && !schema.enum.includes(value)) {
    out.push({ pointer, message: `must be one of ${schema.enum.map((v: unknown) => JSON.stringify(v)).join(", ")}` });
  }
  if (typeof value === "string" && schema.minLength !== undefined && value.length < schema.minLength) {
    out.push({ pointer, message: `must be at least ${schema.minLength} character(s)` });
  }
  if (typeof value === "number") {
    if (schema.minimum !== undefined && value < schema.minimum) {
      out.push({ pointer, message: `must be >= ${schema.minimum}` });
    }
    if (schema.maximum !== undefined && value > schema.maximum) {
      out.push({ pointer, message: `must be <= ${schema.maximum}` });
    }
    if (schema.exclusiveMinimum !== undefined && value <= schema.exclusiveMinimum) {
      out.push({ pointer, message: `must be > ${schema.exclusiveMinimum}` });
    }
  }
  if (typeOf(value) === "object" && (schema.type === "object" || schema.properties)) {
    const obj = value as Record<string, unknown>;
    for (const key of schema.required ?? []) {
      if (!(key in obj)) {
        out.push({ pointer, message: `missing required property '${key}'` });
      }
    }
    const props: Record<string, Schema> = schema.properties ?? {};
    for (const [key, sub] of Object.entries(obj)) {
      if (key in props) {
        checkNode(sub, props[key], `${pointer}/${key}`, out);
      } else if (schema.additionalProperties === false) {
        out.push({ pointer: `${pointer}/${key}`, message: `unexpected property '${key}'` });
      }
    }
  }
}

/** Validate a document; returns violations in pointer order (empty = valid). */
export function validateAgainstSchema(doc: unknown, schema: Schema): Violation[] {
  const out: Violation[] = [];
  checkNode(doc, schema, "", out);
  out.sort((a, b) => (a.pointer < b.pointer ? -1 : a.pointer > b.pointer ? 1 : 0));
  return out;
}
