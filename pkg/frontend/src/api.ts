/** Commands against the session service; errors carry the HTTP status. */

export class ApiError extends Error {
  constructor(
    message: string,
    readonly status: number,
  ) {
    super(message);
  }

  get busy(): boolean {
    return this.status === 409;
  }
}

export interface ApiOptions {
  fetchImpl?: typeof fetch;
  token?: string;
}

function headers(options: ApiOptions): Record<string, string> {
  const base: Record<string, string> = { "Content-Type": "application/json" };
  if (options.token) base["Authorization"] = `Bearer ${options.token}`;
  return base;
}

async function post(
  url: string,
  body: unknown,
  options: ApiOptions,
): Promise<unknown> {
  const fetchImpl = options.fetchImpl ?? fetch;
  const response = await fetchImpl(url, {
    method: "POST",
    headers: headers(options),
    body: JSON.stringify(body),
  });
  if (!response.ok) {
    let detail = `HTTP ${response.status}`;
    try {
      const parsed = (await response.json()) as { detail?: string };
      if (parsed.detail) detail = parsed.detail;
    } catch {
      /* body was not json */
    }
    throw new ApiError(detail, response.status);
  }
  return response.json();
}

export function submitInstruction(
  baseUrl: string,
  sessionId: string,
  text: string,
  options: ApiOptions = {},
): Promise<unknown> {
  return post(`${baseUrl}/sessions/${sessionId}/instruction`, { text }, options);
}

export function interruptSession(
  baseUrl: string,
  sessionId: string,
  options: ApiOptions = {},
): Promise<unknown> {
  return post(`${baseUrl}/sessions/${sessionId}/interrupt`, {}, options);
}

export function createSession(
  baseUrl: string,
  body: Record<string, unknown>,
  options: ApiOptions = {},
): Promise<unknown> {
  return post(`${baseUrl}/sessions`, body, options);
}

export async function listSessions(
  baseUrl: string,
  options: ApiOptions = {},
): Promise<unknown[]> {
  const fetchImpl = options.fetchImpl ?? fetch;
  const response = await fetchImpl(`${baseUrl}/sessions`, { headers: headers(options) });
  if (!response.ok) throw new ApiError(`HTTP ${response.status}`, response.status);
  return (await response.json()) as unknown[];
}
